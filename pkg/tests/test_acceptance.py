"""Acceptance suite: one test per criterion, each printed as PASS/FAIL in the
terminal summary (see conftest.py).

Criteria 7 and 8 train full desk-scale models and dominate the runtime
(roughly 25 minutes on one CPU core).
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import protorecon.nets as nets
import protorecon.trainer as trainer
from protorecon import voxel as vx
from protorecon.cli import main as cli
from protorecon.config import TrainConfig
from protorecon.losses import gen_adv_loss, rec_loss, unsup_loss
from protorecon.nets import Discriminator, Generator, attention_prior, count_parameters
from protorecon.pipeline import directional_benchmark, fewshot_experiment
from protorecon.prototype import lloyd_kmeans
from protorecon.synth import CATEGORIES, DataConfig, build_dataset
from protorecon.trainer import cosine_alpha, ema_update
from helpers import random_batch, spread_parameters, tiny_config
from oracles import best_partition, central_differences, iou_oracle, relative_error

SEEDS = (0, 1, 2)


def _measure(record_property, text):
    record_property("measured", text)
    print(text)


# 1


def test_criterion_1_iou_oracle(record_property):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    count = 0
    for r in (4, 8, 16):
        for t in (0.1, 0.3, 0.5):
            for _ in range(200):
                pred = rng.random((r, r, r))
                gt = (rng.random((r, r, r)) < rng.uniform(0.05, 0.7)).astype(np.uint8)
                worst = max(worst, abs(vx.iou(pred, gt, t) - iou_oracle(pred, gt, t)))
                count += 1
    elapsed = time.perf_counter() - t0
    _measure(record_property, f"{count} pairs, max abs err {worst:.1e}, {elapsed:.2f}s")
    assert worst <= 1e-12
    # the triple-loop oracle dominates; iou itself is timed on its own
    t0 = time.perf_counter()
    for r in (4, 8, 16):
        for t in (0.1, 0.3, 0.5):
            for _ in range(200):
                vx.iou(rng.random((r, r, r)), (rng.random((r, r, r)) > 0.5).astype(np.uint8), t)
    assert time.perf_counter() - t0 < 5.0


# 2


def _gradient_errors(loss_fn, params):
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.detach().clone() for p in params.values()]
    numeric = central_differences(loss_fn, list(params.values()), step=1e-4)
    return {name: relative_error(a, n) for name, a, n in zip(params, analytic, numeric)}


def test_criterion_2_gradient_suite(record_property):
    t0 = time.perf_counter()
    cfg = tiny_config()
    torch.manual_seed(0)
    gen = spread_parameters(Generator(cfg).double(), seed=11)
    disc = spread_parameters(Discriminator(cfg).double(), seed=12)
    assert count_parameters(gen) + count_parameters(disc) <= 5000
    images, voxels = random_batch(cfg, 2, seed=1, dtype=torch.float64)
    images_u, pseudo = random_batch(cfg, 2, seed=2, dtype=torch.float64)
    protos = random_batch(cfg, 3, seed=3, dtype=torch.float64)[1]
    scores = torch.tensor([0.7, 0.2], dtype=torch.float64)
    gen_params = dict(gen.named_parameters())
    all_params = {**gen_params, **{f"disc.{k}": v for k, v in disc.named_parameters()}}
    for name in ("attention.w_q", "attention.w_k", "attention.w_v"):
        assert name in gen_params

    losses = {
        "rec": (lambda: rec_loss(gen(images, protos), voxels), gen_params),
        "gen_adv": (lambda: gen_adv_loss(disc, gen(images, protos)), all_params),
        "unsup": (lambda: unsup_loss(gen(images_u, protos), pseudo, scores), gen_params),
        "composite": (lambda: rec_loss(gen(images, protos), voxels)
                      + cfg.lambda_u * unsup_loss(gen(images_u, protos), pseudo, scores), gen_params),
    }
    with torch.no_grad():
        fakes = gen(torch.cat([images, images_u]), protos)
        assert 1e-3 < float(fakes.min()) and float(fakes.max()) < 1 - 1e-3
    worst = {}
    for name, (fn, params) in losses.items():
        errs = _gradient_errors(fn, params)
        worst[name] = max(errs.values())
        assert all(math.isfinite(e) for e in errs.values())
        assert worst[name] <= 1e-4, (name, sorted(errs.items(), key=lambda kv: -kv[1])[:3])
    elapsed = time.perf_counter() - t0
    _measure(record_property, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.0f}s")
    assert elapsed < 120


# 3


def test_criterion_3_ema_exactness(record_property):
    rng = np.random.default_rng(0)
    for _ in range(50):
        shapes = [tuple(rng.integers(1, 5, size=rng.integers(0, 4))) for _ in range(rng.integers(1, 6))]
        t = {f"p{i}": torch.from_numpy(rng.normal(size=s)) for i, s in enumerate(shapes)}
        s = {k: torch.from_numpy(rng.normal(size=v.shape)) for k, v in t.items()}
        alpha = float(rng.uniform(0, 1))
        out = ema_update(t, s, alpha)
        for k in t:
            ref = np.array([alpha * a + (1.0 - alpha) * b for a, b in zip(t[k].flatten().tolist(), s[k].flatten().tolist())])
            assert np.array_equal(out[k].flatten().numpy(), ref)

    alpha = 0.9
    teacher = {"w": torch.from_numpy(rng.normal(size=(4, 3))), "b": torch.from_numpy(rng.normal(size=3))}
    student = {k: torch.from_numpy(rng.normal(size=v.shape)) for k, v in teacher.items()}

    def dist(a):
        return math.sqrt(sum(float(((a[k] - student[k]) ** 2).sum()) for k in a))

    worst = 0.0
    d = dist(teacher)
    for _ in range(100):
        teacher = ema_update(teacher, student, alpha)
        d_new = dist(teacher)
        worst = max(worst, abs(d_new - alpha * d))
        d = d_new
    assert worst <= 1e-12
    assert cosine_alpha(0, 1000, 0.9996) == 0.9996
    assert cosine_alpha(1000, 1000, 0.9996) == 1.0
    assert cosine_alpha(500, 1000, 0.9996) == pytest.approx(1 - 0.0004 / 2, abs=1e-15)
    values = [cosine_alpha(s, 1000, 0.9996) for s in range(1001)]
    assert all(a <= b for a, b in zip(values, values[1:]))
    _measure(record_property, f"max contraction deviation {worst:.1e}")


# 4


def test_criterion_4_attention_properties(record_property):
    g = torch.Generator().manual_seed(0)
    worst_sum = worst_perm = 0.0
    single_exact = True
    for i in range(1000):
        c = int(torch.randint(1, 12, (1,), generator=g))
        heads = int(torch.randint(1, 4, (1,), generator=g))
        d = heads * int(torch.randint(1, 6, (1,), generator=g))
        n = int(torch.randint(1, 10, (1,), generator=g))
        b = int(torch.randint(1, 4, (1,), generator=g))
        q = torch.randn(b, c, generator=g)
        tokens = torch.randn(n, d, generator=g)
        # float32 with the module's 1/sqrt(fan_in) projection scale
        wq = torch.randn(c, d, generator=g) / math.sqrt(c)
        wk, wv = (torch.randn(d, d, generator=g) / math.sqrt(d) for _ in range(2))
        out, w = attention_prior(q, tokens, wq, wk, wv, heads, return_weights=True)
        assert (w >= 0).all()
        worst_sum = max(worst_sum, float((w.sum(-1) - 1).abs().max()))
        perm = torch.randperm(n, generator=g)
        worst_perm = max(worst_perm, float((attention_prior(q, tokens[perm], wq, wk, wv, heads) - out).abs().max()))
        one = attention_prior(q, tokens[:1], wq, wk, wv, heads)
        single_exact &= torch.equal(one, (tokens[:1] @ wv).expand(b, -1))
    _measure(record_property, f"sum err {worst_sum:.1e}, perm err {worst_perm:.1e}, single exact {single_exact}")
    assert worst_sum <= 1e-6
    assert worst_perm <= 1e-6
    assert single_exact


# 5


def test_criterion_5_kmeans(record_property):
    rng = np.random.default_rng(0)
    worst_mean = 0.0
    for trial in range(30):
        k = int(rng.integers(1, 6))
        x = rng.normal(size=(int(rng.integers(k, 60)), int(rng.integers(1, 6))))
        if trial % 3 == 0:
            x[: len(x) // 2] += 5.0
        res = lloyd_kmeans(x, k, seed=trial)
        hist = res.sse_history
        assert all(b <= a + 1e-9 * max(1.0, a) for a, b in zip(hist, hist[1:])), hist
        for j in range(k):
            members = x[res.assignments == j]
            if len(members):
                worst_mean = max(worst_mean, float(np.abs(res.centers[j] - members.mean(axis=0)).max()))
    assert worst_mean <= 1e-9

    pts = [(0.0, 0.0), (0.0, 1.0), (10.0, 10.0), (10.0, 11.0)]
    best_sse, best_assign = best_partition(pts, 2)
    res = lloyd_kmeans(np.array(pts), 2, seed=0)
    expected = sorted(tuple(np.mean([p for p, a in zip(pts, best_assign) if a == c], axis=0)) for c in (0, 1))
    got = sorted(tuple(c) for c in res.centers)
    assert np.allclose(got, expected, atol=1e-12) and np.allclose(got, [(0, 0.5), (10, 10.5)])
    assert abs(res.sse - best_sse) <= 1e-12
    _measure(record_property, f"centre/mean err {worst_mean:.1e}, 4-point SSE {res.sse:g} = optimum {best_sse:g}")


# 6


def _write_tiny_config(path, **extra):
    cfg = tiny_config(warmup_epochs=2, mutual_epochs=2, fewshot_epochs=2, ae_epochs=2, **extra)
    path.write_text(cfg.to_text())
    return path


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """Data, autoencoder, bank and warm-up checkpoint for a tiny CLI pipeline."""
    root = tmp_path_factory.mktemp("tiny")
    data_cfg = root / "data.cfg"
    data_cfg.write_text("n_train = 12\nn_test = 2\nr_v = 8\nimage_size = 16\nratio = 0.25\nseed = 5\nsplit_seed = 5\n")
    train_cfg = _write_tiny_config(root / "train.cfg")
    m = str(root / "data" / "manifest.tsv")
    assert cli(["gen-data", "--config", str(data_cfg), "--out", str(root / "data")]) == 0
    assert cli(["train-ae", "--manifest", m, "--config", str(train_cfg), "--out", str(root / "ae.ckpt")]) == 0
    assert cli(["build-prototypes", "--manifest", m, "--ae", str(root / "ae.ckpt"), "--k", "3",
                "--config", str(train_cfg), "--out", str(root / "bank")]) == 0
    return root, m, train_cfg


def _tensors(path):
    return trainer.CheckpointPair.load(path)


def _same_trees(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_criterion_6_ablation_semantics(tiny_run, monkeypatch, record_property):
    root, m, cfg = tiny_run
    bank = str(root / "bank")

    def train(out, *flags):
        out = root / out
        out.mkdir(exist_ok=True)
        assert cli(["warmup", "--manifest", m, "--bank", bank, "--config", str(cfg), "--out", str(out / "warm.ckpt"), *flags]) == 0
        assert cli(["mutual", "--resume", str(out / "warm.ckpt"), "--out", str(out / "final.ckpt"), *flags]) == 0
        return _tensors(out / "warm.ckpt"), _tensors(out / "final.ckpt")

    # --no-score against the full model with the discriminator forced to 1
    _, no_score = train("no_score", "--no-score")
    with monkeypatch.context() as mp:
        mp.setattr(trainer, "discriminate", lambda disc, v: torch.ones(len(v), dtype=v.dtype))
        _, ones = train("ones")
    assert _same_trees(no_score.student, ones.student) and _same_trees(no_score.teacher, ones.teacher)

    # --no-pam against the full model with the attention prior forced to zeros
    warm_np, no_pam = train("no_pam", "--no-pam")
    with monkeypatch.context() as mp:
        mp.setattr(nets.Generator, "prior", lambda self, q, t: q.new_zeros(q.shape[0], self.token_dim))
        warm_zero, zero = train("zero_prior")
    assert _same_trees(warm_np.student, warm_zero.student)
    assert _same_trees(no_pam.student, zero.student) and _same_trees(no_pam.teacher, zero.teacher)

    # alpha = 1: teacher untouched while the student moves
    warm, frozen = train("alpha1", "--alpha0", "1.0")
    assert _same_trees(warm.teacher, frozen.teacher)
    assert not _same_trees(warm.student, frozen.student)
    _measure(record_property, "no-score == scores 1, no-pam == zero prior, alpha 1 keeps teacher: bitwise")


# 7


def test_criterion_7_directional_benchmark(record_property):
    t0 = time.perf_counter()
    data_cfg = DataConfig(n_train=500, n_test=50, r_v=16, ratio=0.10)
    cfg = TrainConfig(warmup_epochs=40, mutual_epochs=20)
    runs = directional_benchmark(data_cfg, cfg, SEEDS)
    sup = [r.warmup_report.mean_iou for r in runs]
    ssl = [r.mutual_report.mean_iou for r in runs]
    gain = float(np.mean(ssl) - np.mean(sup))
    per_seed = "; ".join(f"seed {s}: {a:.2f} -> {b:.2f}" for s, a, b in zip(SEEDS, sup, ssl))
    _measure(record_property, f"{per_seed}; mean gain {gain:+.2f} IoU points, {(time.perf_counter() - t0) / 60:.1f} min")
    for r in runs:
        assert len(r.mutual_report.per_sample) == 200
    assert gain >= 0.5


# 8


def test_criterion_8_fewshot_directional(record_property):
    novel = "sphere-cap"
    zero, few = [], []
    for seed in SEEDS:
        manifest = build_dataset(DataConfig(n_train=500, n_test=50, r_v=16, ratio=0.10, seed=seed, split_seed=seed))
        z, f = fewshot_experiment(manifest, novel, TrainConfig(seed=seed))
        assert set(z.per_category) == {novel} and z.n_samples[novel] == 50
        zero.append(z.mean_iou)
        few.append(f.mean_iou)
    per_seed = "; ".join(f"seed {s}: {a:.2f} -> {b:.2f}" for s, a, b in zip(SEEDS, zero, few))
    _measure(record_property, f"{novel} zero-shot -> finetuned: {per_seed}")
    assert all(f >= z for z, f in zip(zero, few))


# 9


def test_criterion_9_loss_anchors(record_property):
    pred = torch.full((3, 1, 8, 8, 8), 0.5, dtype=torch.float64)
    gt = (torch.rand(3, 1, 8, 8, 8, generator=torch.Generator().manual_seed(0)) > 0.5).double()
    rec = float(rec_loss(pred, gt))
    assert abs(rec - math.log(2)) <= 1e-9
    preds = torch.rand(5, 1, 8, 8, 8, dtype=torch.float64)
    zero = float(unsup_loss(preds, gt[:1].expand(5, -1, -1, -1, -1), torch.zeros(5, dtype=torch.float64)))
    assert zero == 0.0
    quarter = float(unsup_loss(pred[:1], torch.ones_like(pred[:1]), torch.ones(1, dtype=torch.float64)))
    assert abs(quarter - 0.25) <= 1e-9
    _measure(record_property, f"rec {rec!r}, zero-score {zero!r}, brier {quarter!r}")


# 10


def _snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _cli_pipeline(workdir, monkeypatch):
    monkeypatch.chdir(workdir)
    Path("data.cfg").write_text("n_train = 12\nn_test = 2\nr_v = 8\nimage_size = 16\nratio = 0.25\nseed = 9\nsplit_seed = 9\n")
    _write_tiny_config(Path("train.cfg"), seed=4)
    base = [c for c in CATEGORIES if c != "tube"]
    steps = [
        ["gen-data", "--config", "data.cfg", "--out", "data"],
        ["train-ae", "--manifest", "data/manifest.tsv", "--config", "train.cfg", "--out", "ae.ckpt", "--categories", *base],
        ["build-prototypes", "--manifest", "data/manifest.tsv", "--ae", "ae.ckpt", "--k", "3", "--config", "train.cfg",
         "--out", "bank", "--categories", *base],
        ["warmup", "--manifest", "data/manifest.tsv", "--bank", "bank", "--config", "train.cfg", "--out", "run/warm.ckpt",
         "--categories", *base],
        ["mutual", "--resume", "run/warm.ckpt", "--out", "run/final.ckpt"],
        ["eval", "--checkpoint", "run/final.ckpt", "--out", "run"],
        ["eval", "--checkpoint", "run/warm.ckpt", "--which", "student", "--out", "warm_eval"],
        ["report", "--runs", "run", "warm_eval", "--baseline", "warm_eval", "--out", "report.tsv"],
        ["plots", "--run", "run"],
        ["fewshot", "--resume", "run/final.ckpt", "--novel", "tube", "--ae", "ae.ckpt", "--out", "fewshot"],
    ]
    for argv in steps:
        assert cli(argv) == 0, argv
    Path("data.cfg").unlink()
    Path("train.cfg").unlink()
    return _snapshot(Path("."))


def test_criterion_10_determinism(tmp_path, monkeypatch, record_property):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    first = _cli_pipeline(tmp_path / "a", monkeypatch)
    second = _cli_pipeline(tmp_path / "b", monkeypatch)
    assert first.keys() == second.keys()
    differing = [k for k in first if first[k] != second[k]]
    kinds = {k.rsplit(".", 1)[-1] for k in first}
    _measure(record_property, f"{len(first)} files ({', '.join(sorted(kinds))}), {len(differing)} differ")
    assert not differing
    for required in ("run/warm.ckpt", "run/final.ckpt", "run/eval_report.tsv", "run/warmup_log.tsv",
                     "run/mutual_log.tsv", "run/loss_curves.png", "report.tsv", "fewshot/fewshot_report.tsv"):
        assert required in first
