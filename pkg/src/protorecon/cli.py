"""Command-line interface.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence.
"""

import argparse
import logging
import sys
from pathlib import Path

import torch

from . import checkpoint as ckpt_io
from .config import TrainConfig, parse_kv_text
from .errors import ConfigError, DataError, ProtoReconError, StageOrderError
from .evaluation import EvalReport, compare_runs, emit_plots, evaluate, file_digest, write_tsv
from .pipeline import ABLATIONS, run_ablations, split_novel
from .prototype import AutoEncoder, PrototypeBank, build_prototype_bank, novel_prototypes, train_autoencoder
from .synth import DataConfig, DatasetManifest, build_dataset
from .trainer import CheckpointPair, fewshot_finetune, mutual_train, warmup_train

logger = logging.getLogger("protorecon")


def _overrides(args):
    values = {}
    for item in getattr(args, "set", None) or []:
        values.update(parse_kv_text(item, "--set"))
    flag_map = {
        "no_pam": ("use_pam", False),
        "no_snm": ("use_snm", False),
        "no_score": ("use_score", False),
    }
    for flag, (key, value) in flag_map.items():
        if getattr(args, flag, False):
            values[key] = value
    for key in ("fusion", "unsup_loss", "alpha0", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            values[key] = value
    return values


def _config(args, base=None):
    if getattr(args, "config", None):
        cfg = TrainConfig.from_file(args.config)
    else:
        cfg = base or TrainConfig()
    overrides = _overrides(args)
    return TrainConfig.from_dict({**cfg.to_dict(), **overrides}) if overrides else cfg


def _save_ae(ae, cfg, history, path):
    meta = {"kind": "autoencoder", "r_v": ae.r_v, "latent": ae.latent,
            "channels": list(cfg.enc3d_channels), "history": history}
    ckpt_io.save(path, ae.state_dict(), meta)


def _load_ae(path):
    tensors, meta = ckpt_io.load(path)
    if meta.get("kind") != "autoencoder":
        raise DataError(f"{path} is not an autoencoder checkpoint")
    ae = AutoEncoder(meta["r_v"], meta["latent"], tuple(meta["channels"]))
    ae.load_state_dict(tensors)
    ae.eval()
    return ae


def cmd_gen_data(args):
    cfg = DataConfig.from_file(args.config) if args.config else DataConfig()
    manifest = build_dataset(cfg, args.out)
    print(f"wrote {len(manifest.samples)} samples ({len(manifest.labeled_ids)} labeled, "
          f"{len(manifest.unlabeled_ids)} unlabeled, {len(manifest.test_ids)} test) to {args.out}")


def _manifest(path, categories=None):
    manifest = DatasetManifest.read(path)
    if categories:
        manifest = manifest.restrict(categories)
    return manifest


def cmd_train_ae(args):
    cfg = _config(args)
    manifest = _manifest(args.manifest, args.categories)
    labeled = manifest.subset("labeled")
    ae, history = train_autoencoder([s.voxel for s in labeled], [s.category for s in labeled], cfg)
    _save_ae(ae, cfg, history, args.out)
    print(f"autoencoder loss {history[0]:.4f} -> {history[-1]:.4f}; saved {args.out}")


def cmd_build_prototypes(args):
    cfg = _config(args)
    manifest = _manifest(args.manifest, args.categories)
    bank = build_prototype_bank(manifest, _load_ae(args.ae), args.k, cfg.seed, cfg.delta)
    bank.write(args.out)
    print(f"wrote {len(bank)} prototypes to {args.out}")


def _log_path(out, name):
    return Path(out).parent / name


def cmd_warmup(args):
    cfg = _config(args)
    manifest = _manifest(args.manifest, args.categories)
    bank = PrototypeBank.read(args.bank)
    result = warmup_train(manifest, bank, cfg)
    result.meta.update({"manifest": str(args.manifest), "bank": str(args.bank)})
    result.save(args.out)
    write_tsv(_log_path(args.out, "warmup_log.tsv"), result.history)
    print(f"warm-up done after {result.step} steps; saved {args.out}")


def _resume(args, restrict=True):
    if not Path(args.resume).exists():
        raise StageOrderError(f"checkpoint not found: {args.resume}")
    ckpt = CheckpointPair.load(args.resume)
    path = args.manifest or ckpt.meta.get("manifest")
    if path is None:
        raise ConfigError("no --manifest given and the checkpoint does not record one")
    manifest = _manifest(path, ckpt.meta.get("categories") if restrict else None)
    bank = PrototypeBank.read(args.bank or ckpt.meta.get("bank"))
    return ckpt, manifest, bank


def cmd_mutual(args):
    ckpt, manifest, bank = _resume(args)
    cfg = _config(args, base=ckpt.config)
    result = mutual_train(ckpt, manifest, bank, cfg)
    result.save(args.out)
    write_tsv(_log_path(args.out, "mutual_log.tsv"), result.history)
    print(f"mutual learning done at step {result.step}; saved {args.out}")


def cmd_fewshot(args):
    ckpt, manifest, bank = _resume(args, restrict=False)
    cfg = _config(args, base=ckpt.config)
    _, novel_train, novel_test = split_novel(manifest, args.novel, cfg.fewshot_shots, cfg.seed)
    bank = bank.extend(novel_prototypes(_load_ae(args.ae), args.novel, [s.voxel for s in novel_train],
                                        bank.k or cfg.k, cfg.seed, cfg.delta))
    zero = evaluate(ckpt, novel_test, bank, cfg)
    tuned = fewshot_finetune(ckpt, novel_train, bank, cfg)
    few = evaluate(tuned, novel_test, bank, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tuned.meta["bank"] = str(out / "bank")
    tuned.save(out / "fewshot.ckpt")
    bank.write(out / "bank")
    zero.write(out, "zeroshot")
    few.write(out, "fewshot")
    print(f"{args.novel}: zero-shot {zero.mean_iou:.2f} -> finetuned {few.mean_iou:.2f}")


def cmd_eval(args):
    ckpt = CheckpointPair.load(args.checkpoint)
    categories = ckpt.meta.get("categories", []) + ckpt.meta.get("novel", [])
    manifest = _manifest(args.manifest or ckpt.meta.get("manifest"), categories)
    bank = PrototypeBank.read(args.bank or ckpt.meta.get("bank"))
    report = evaluate(ckpt, manifest, bank, which=args.which, checkpoint_id=file_digest(args.checkpoint))
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    report.write(out, "eval")
    for c in sorted(report.per_category):
        print(f"{c}\t{report.n_samples[c]}\t{report.per_category[c]:.2f}")
    print(f"mean (category-weighted)\t{report.category_mean:.2f}")
    print(f"mean (sample-weighted)\t{report.sample_mean:.2f}")


def cmd_report(args):
    runs = [Path(args.baseline)] + [Path(r) for r in args.runs if Path(r) != Path(args.baseline)]
    reports = [EvalReport.read(r) for r in runs]
    comparison = compare_runs(reports, names=[r.name for r in runs], baseline=0)
    text = comparison.to_text()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_plots(args):
    for path in emit_plots(args.run):
        print(path)


def cmd_ablate(args):
    cfg = _config(args)
    manifest = DatasetManifest.read(args.manifest)
    _, comparison = run_ablations(manifest, cfg, args.variants, args.out)
    sys.stdout.write(comparison.to_text())


def _add_train_flags(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-pam", action="store_true", help="drop the prototype attention prior")
    p.add_argument("--fusion", choices=["mha", "average"])
    p.add_argument("--no-snm", action="store_true", help="no discriminator, no adversarial loss")
    p.add_argument("--no-score", action="store_true", help="weight every pseudo-label by 1")
    p.add_argument("--unsup-loss", choices=["l2", "bce"])
    p.add_argument("--alpha0", type=float)
    p.add_argument("--categories", nargs="+", help="restrict the manifest to these categories")


def build_parser():
    parser = argparse.ArgumentParser(prog="protorecon", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-ae", help="train the prototype autoencoder")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_ae)

    p = sub.add_parser("build-prototypes", help="cluster labeled shapes into a prototype bank")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ae", required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_build_prototypes)

    p = sub.add_parser("warmup", help="adversarial warm-up on the labeled split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_warmup)

    p = sub.add_parser("mutual", help="teacher-student mutual learning")
    p.add_argument("--resume", required=True)
    p.add_argument("--manifest")
    p.add_argument("--bank")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_mutual)

    p = sub.add_parser("fewshot", help="finetune on 10 pairs of a held-out category")
    p.add_argument("--resume", required=True)
    p.add_argument("--novel", required=True)
    p.add_argument("--ae", required=True)
    p.add_argument("--manifest")
    p.add_argument("--bank")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_fewshot)

    p = sub.add_parser("eval", help="per-category IoU of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--bank")
    p.add_argument("--which", choices=["teacher", "student"], default="teacher")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="compare eval reports against a baseline")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("plots", help="plot metric logs of a run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_plots)

    p = sub.add_parser("ablate", help="train and compare named ablations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--variants", nargs="+", choices=sorted(ABLATIONS))
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        args.func(args)
    except ProtoReconError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
