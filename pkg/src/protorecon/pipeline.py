"""End-to-end orchestration: data, prototypes, both training stages and
evaluation, plus the ablation, sweep and few-shot experiments built on it."""

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import compare_runs, evaluate, write_tsv
from .prototype import PrototypeBank, build_prototype_bank, novel_prototypes, train_autoencoder
from .synth import DatasetManifest, build_dataset
from .trainer import fewshot_finetune, mutual_train, warmup_train

logger = logging.getLogger(__name__)

# named ablations: config overrides applied on top of the base config
ABLATIONS = {
    "full": {},
    "no_pam": {"use_pam": False},
    "average": {"fusion": "average"},
    "no_snm": {"use_snm": False},
    "no_score": {"use_score": False},
    "bce": {"unsup_loss": "bce"},
}


def fit_prototypes(manifest, cfg):
    labeled = manifest.subset("labeled")
    ae, history = train_autoencoder([s.voxel for s in labeled], [s.category for s in labeled], cfg)
    bank = build_prototype_bank(manifest, ae, cfg.k, cfg.seed, cfg.delta)
    return ae, bank, history


@dataclass
class RunResult:
    warmup: object
    mutual: object
    warmup_report: object
    mutual_report: object
    bank: PrototypeBank
    ae: object = None
    extras: dict = field(default_factory=dict)


def run_ssl(manifest, cfg, bank=None, out_dir=None):
    """Warm-up, evaluate it as the supervised baseline, then mutual learning."""
    ae = None
    if bank is None:
        ae, bank, _ = fit_prototypes(manifest, cfg)
    warm = warmup_train(manifest, bank, cfg)
    warm_report = evaluate(warm, manifest, bank, cfg)
    final = mutual_train(warm, manifest, bank, cfg)
    final_report = evaluate(final, manifest, bank, cfg)
    logger.info("seed %d: warm-up %.2f -> mutual %.2f", cfg.seed, warm_report.mean_iou, final_report.mean_iou)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        bank.write(out_dir / "bank")
        warm.save(out_dir / "warm.ckpt")
        final.save(out_dir / "final.ckpt")
        write_tsv(out_dir / "warmup_log.tsv", warm.history)
        if final.history:
            write_tsv(out_dir / "mutual_log.tsv", final.history)
        warm_report.write(out_dir, "warmup")
        final_report.write(out_dir, "eval")
    return RunResult(warm, final, warm_report, final_report, bank, ae)


def directional_benchmark(data_cfg, cfg, seeds=(0, 1, 2)):
    """Warm-up-only baseline vs full mutual learning, one dataset and run per seed."""
    results = []
    for seed in seeds:
        manifest = build_dataset(dataclasses.replace(data_cfg, seed=seed, split_seed=seed))
        results.append(run_ssl(manifest, cfg.replace(seed=seed)))
    return results


def run_ablations(manifest, cfg, names=None, out_dir=None):
    """Train every named ablation from the same data; returns reports and the comparison."""
    names = list(names or ABLATIONS)
    ae, bank, _ = fit_prototypes(manifest, cfg)
    reports = {}
    for name in names:
        variant = cfg.replace(**ABLATIONS[name])
        run = run_ssl(manifest, variant, bank=bank, out_dir=None if out_dir is None else Path(out_dir) / name)
        reports[name] = run.mutual_report
    comparison = compare_runs([reports[n] for n in names], names=names)
    if out_dir is not None:
        (Path(out_dir) / "ablations.tsv").write_text(comparison.to_text())
    return reports, comparison


def alpha_sweep(manifest, cfg, alphas=(0.99, 0.999, 0.9996, 0.9999), out_dir=None):
    _, bank, _ = fit_prototypes(manifest, cfg)
    warm = warmup_train(manifest, bank, cfg)
    rows = []
    for a in alphas:
        final = mutual_train(warm, manifest, bank, cfg.replace(alpha0=a))
        rows.append({"alpha0": a, "iou": evaluate(final, manifest, bank, cfg).mean_iou})
    if out_dir is not None:
        write_tsv(Path(out_dir) / "alpha_sweep.tsv", rows)
    return rows


def ratio_sweep(data_cfg, cfg, ratios=(0.01, 0.05, 0.10, 0.20), out_dir=None):
    rows = []
    for ratio in ratios:
        manifest = build_dataset(dataclasses.replace(data_cfg, ratio=ratio))
        run = run_ssl(manifest, cfg)
        rows.append({"ratio": ratio, "supervised": run.warmup_report.mean_iou, "ssl": run.mutual_report.mean_iou})
    if out_dir is not None:
        write_tsv(Path(out_dir) / "ratio_sweep.tsv", rows)
    return rows


def split_novel(manifest, novel, shots, seed=0):
    """Base manifest without ``novel``; ``shots`` labeled novel pairs; novel-only test manifest."""
    base = manifest.restrict([c for c in manifest.categories if c != novel])
    pool = [s for s in manifest.samples if s.category == novel and manifest.split_of(s.id) != "test"]
    rng = np.random.default_rng(seed)
    picks = sorted(rng.choice(len(pool), size=shots, replace=False).tolist())
    novel_train = [pool[i] for i in picks]
    novel_test = manifest.restrict([novel])
    novel_test = DatasetManifest(novel_test.samples, [], [], novel_test.test_ids, manifest.ratio, manifest.seed)
    return base, novel_train, novel_test


def fewshot_experiment(manifest, novel, cfg):
    """Train on base categories, then compare zero-shot and finetuned IoU on ``novel``."""
    base, novel_train, novel_test = split_novel(manifest, novel, cfg.fewshot_shots, cfg.seed)
    ae, bank, _ = fit_prototypes(base, cfg)
    warm = warmup_train(base, bank, cfg)
    trained = mutual_train(warm, base, bank, cfg) if cfg.mutual_epochs else warm
    bank = bank.extend(novel_prototypes(ae, novel, [s.voxel for s in novel_train], cfg.k, cfg.seed, cfg.delta))
    zero = evaluate(trained, novel_test, bank, cfg)
    tuned = fewshot_finetune(trained, novel_train, bank, cfg)
    few = evaluate(tuned, novel_test, bank, cfg)
    return zero, few
