"""Evaluation reports, run comparison and plots.

All logs are tab-separated text with floats written via ``repr`` so that
aggregates can be recomputed exactly from the per-sample log.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import voxel as vx
from .config import format_value
from .errors import DataError

logger = logging.getLogger(__name__)


@torch.no_grad()
def reconstruct(generator, images, bank, batch_size=64):
    """Occupancy probabilities for a stack of images, shape (N, 1, r, r, r)."""
    generator.eval()
    tokens = bank.features(generator) if generator.use_pam else None
    outs = [generator(images[i:i + batch_size], tokens=tokens) for i in range(0, len(images), batch_size)]
    return torch.cat(outs)


@dataclass
class EvalReport:
    per_category: dict  # category -> mean IoU in percent
    n_samples: dict
    category_mean: float  # unweighted over categories
    sample_mean: float  # weighted by sample count
    config: dict = field(default_factory=dict)
    checkpoint_id: str = ""
    which: str = "teacher"
    per_sample: list = field(default_factory=list)  # (id, category, iou)

    @property
    def mean_iou(self):
        return self.category_mean

    def to_text(self):
        lines = [f"# checkpoint={self.checkpoint_id}", f"# which={self.which}"]
        lines += [f"# config.{k}={format_value(v)}" for k, v in self.config.items()]
        lines.append("category\tn\tiou")
        for c in sorted(self.per_category):
            lines.append(f"{c}\t{self.n_samples[c]}\t{self.per_category[c]!r}")
        total = sum(self.n_samples.values())
        lines.append(f"mean_category\t{total}\t{self.category_mean!r}")
        lines.append(f"mean_sample\t{total}\t{self.sample_mean!r}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem="eval"):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}_report.tsv").write_text(self.to_text())
        rows = ["id\tcategory\tiou"] + [f"{i}\t{c}\t{v!r}" for i, c, v in self.per_sample]
        (out_dir / f"{stem}_samples.tsv").write_text("\n".join(rows) + "\n")

    @classmethod
    def read(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / "eval_report.tsv"
        if not path.exists():
            raise DataError(f"report not found: {path}")
        per, counts, meta, config = {}, {}, {}, {}
        cat_mean = samp_mean = float("nan")
        for line in path.read_text().splitlines():
            if line.startswith("# config."):
                key, _, value = line[len("# config."):].partition("=")
                config[key] = value
            elif line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key] = value
            elif line.startswith("category\t") or not line.strip():
                continue
            else:
                name, n, value = line.split("\t")
                if name == "mean_category":
                    cat_mean = float(value)
                elif name == "mean_sample":
                    samp_mean = float(value)
                else:
                    per[name] = float(value)
                    counts[name] = int(n)
        return cls(per, counts, cat_mean, samp_mean, config, meta.get("checkpoint", ""), meta.get("which", "teacher"))


def aggregate(per_sample):
    """Per-category and overall means (percent) from ``(id, category, iou)`` rows."""
    if not per_sample:
        raise DataError("no samples to aggregate")
    by_cat = {}
    for _, category, value in per_sample:
        by_cat.setdefault(category, []).append(value)
    per_category = {c: 100.0 * float(np.mean(v)) for c, v in sorted(by_cat.items())}
    counts = {c: len(v) for c, v in sorted(by_cat.items())}
    category_mean = float(np.mean(list(per_category.values())))
    sample_mean = 100.0 * float(np.mean([v for _, _, v in per_sample]))
    return per_category, counts, category_mean, sample_mean


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def evaluate(checkpoint, manifest, bank, config=None, which="teacher", split="test", checkpoint_id=""):
    """IoU of every test sample at threshold ``iou_t``, aggregated per category."""
    cfg = config or checkpoint.config
    samples = manifest.subset(split)
    if not samples:
        raise DataError(f"no {split} samples to evaluate")
    generator = checkpoint.generator(which)
    images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32)).unsqueeze(1)
    probs = reconstruct(generator, images, bank).numpy()
    rows = [(s.id, s.category, float(vx.iou(probs[i, 0], s.voxel, cfg.iou_t))) for i, s in enumerate(samples)]
    per_category, counts, cat_mean, samp_mean = aggregate(rows)
    return EvalReport(per_category, counts, cat_mean, samp_mean, cfg.to_dict(), checkpoint_id, which, rows)


@dataclass
class Comparison:
    baseline: str
    names: list
    categories: list
    rows: list  # (category, baseline_value, [(value, delta), ...])

    def to_text(self):
        header = ["category", self.baseline] + [f"{n}\tdelta_{n}" for n in self.names]
        lines = ["\t".join(header)]
        for category, base, others in self.rows:
            cells = [category, f"{base:.2f}"] + [f"{v:.2f}\t{d:+.2f}" for v, d in others]
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"


def compare_runs(reports, names=None, baseline=0):
    """Per-category and mean IoU deltas of every report against ``reports[baseline]``.

    Category sets that differ are intersected (with a warning) and the
    category mean is recomputed over the shared categories.
    """
    if len(reports) < 2:
        raise DataError("compare_runs needs at least two reports")
    names = list(names) if names else [f"run{i}" for i in range(len(reports))]
    base = reports[baseline]
    others = [(n, r) for i, (n, r) in enumerate(zip(names, reports)) if i != baseline]
    shared = set(base.per_category)
    for _, r in others:
        shared &= set(r.per_category)
    if any(set(r.per_category) != shared for r in reports):
        logger.warning("category sets differ; comparing on the intersection: %s", ", ".join(sorted(shared)))
    categories = sorted(shared)
    rows = []
    for c in categories:
        rows.append((c, base.per_category[c], [(r.per_category[c], r.per_category[c] - base.per_category[c]) for _, r in others]))

    def cat_mean(r):
        return float(np.mean([r.per_category[c] for c in categories]))

    rows.append(("mean_category", cat_mean(base), [(cat_mean(r), cat_mean(r) - cat_mean(base)) for _, r in others]))
    if all(set(r.per_category) == shared for r in reports):
        rows.append(("mean_sample", base.sample_mean,
                     [(r.sample_mean, r.sample_mean - base.sample_mean) for _, r in others]))
    return Comparison(names[baseline], [n for n, _ in others], categories, rows)


# metric logs and plots

LOG_FILES = ("warmup_log.tsv", "mutual_log.tsv", "ratio_sweep.tsv", "alpha_sweep.tsv")


def write_tsv(path, rows):
    if not rows:
        raise DataError(f"refusing to write empty log {path}")
    keys = list(rows[0])
    lines = ["\t".join(keys)] + ["\t".join(format_value(r[k]) for k in keys) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_tsv(path):
    lines = [l for l in Path(path).read_text().splitlines() if l.strip()]
    keys = lines[0].split("\t")
    return [dict(zip(keys, (float(v) for v in l.split("\t")))) for l in lines[1:]]


def emit_plots(run_dir):
    """Line plots for whichever metric logs exist in ``run_dir``; returns the written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    present = [f for f in LOG_FILES if (run_dir / f).exists()]
    if not present:
        raise DataError(f"no metric logs in {run_dir}; expected any of: {', '.join(LOG_FILES)}")
    plt.rcParams.update({"figure.dpi": 100, "svg.hashsalt": "protorecon"})
    written = []

    def save(fig, name):
        path = run_dir / name
        fig.savefig(path, format="png", metadata={"Software": None})
        plt.close(fig)
        written.append(path)

    stage_logs = [f for f in ("warmup_log.tsv", "mutual_log.tsv") if f in present]
    if stage_logs:
        fig, axes = plt.subplots(1, len(stage_logs), figsize=(5 * len(stage_logs), 3.5), squeeze=False)
        for ax, name in zip(axes[0], stage_logs):
            rows = read_tsv(run_dir / name)
            epochs = [r["epoch"] for r in rows]
            for key in ("rec", "adv", "disc", "unsup"):
                if key in rows[0]:
                    ax.plot(epochs, [r[key] for r in rows], label=key)
            ax.set_title(name.replace("_log.tsv", ""))
            ax.set_xlabel("epoch")
            ax.set_ylabel("loss")
            ax.legend()
        fig.tight_layout()
        save(fig, "loss_curves.png")

    if "ratio_sweep.tsv" in present:
        rows = sorted(read_tsv(run_dir / "ratio_sweep.tsv"), key=lambda r: r["ratio"])
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ratios = [100 * r["ratio"] for r in rows]
        ax.plot(ratios, [r["supervised"] for r in rows], marker="o", label="supervised only")
        ax.plot(ratios, [r["ssl"] for r in rows], marker="s", label="semi-supervised")
        ax.set_xlabel("labeled ratio (%)")
        ax.set_ylabel("mean IoU (%)")
        ax.legend()
        fig.tight_layout()
        save(fig, "ratio_curve.png")

    if "alpha_sweep.tsv" in present:
        rows = sorted(read_tsv(run_dir / "alpha_sweep.tsv"), key=lambda r: r["alpha0"])
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(range(len(rows)), [r["iou"] for r in rows], marker="o")
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels([format_value(r["alpha0"]) for r in rows])
        ax.set_xlabel("EMA decay alpha")
        ax.set_ylabel("mean IoU (%)")
        fig.tight_layout()
        save(fig, "alpha_sweep.png")
    return written
