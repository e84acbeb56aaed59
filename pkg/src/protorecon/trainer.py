"""Two-stage training: adversarial warm-up on labeled data, then
teacher-student mutual learning with discriminator-scored pseudo-labels
and an EMA teacher. Also the few-shot novel-category finetune."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .config import TrainConfig
from .errors import ConfigError, DataError, DivergenceError, ShapeError, StageOrderError
from .losses import disc_loss, gen_adv_loss, rec_loss, unsup_loss
from .nets import Discriminator, Generator, discriminate
from .synth import strong_augment, weak_augment

logger = logging.getLogger(__name__)

STAGES = ("warmup", "mutual", "fewshot")


def derive_seed(*keys):
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


@dataclass
class Batchable:
    """Images and voxels of one split stacked as tensors."""

    ids: list
    categories: list
    images: torch.Tensor  # (N, 1, H, W)
    voxels: torch.Tensor  # (N, 1, r, r, r)

    @classmethod
    def from_samples(cls, samples):
        if not samples:
            return cls([], [], torch.zeros(0), torch.zeros(0))
        images = torch.from_numpy(np.stack([np.asarray(s.image, dtype=np.float32) for s in samples]))
        voxels = torch.from_numpy(np.stack([np.asarray(s.voxel, dtype=np.float32) for s in samples]))
        return cls([s.id for s in samples], [s.category for s in samples], images.unsqueeze(1), voxels.unsqueeze(1))

    def __len__(self):
        return len(self.ids)


def augment_batch(images, seeds, kind):
    fn = strong_augment if kind == "strong" else weak_augment
    out = [fn(img[0].numpy(), s) for img, s in zip(images, seeds)]
    return torch.from_numpy(np.stack(out)).unsqueeze(1).to(images.dtype)


def cosine_lr(step, total, lr_start, lr_end):
    if total <= 0:
        return lr_start
    return lr_end + (lr_start - lr_end) * (1.0 + math.cos(math.pi * min(step, total) / total)) / 2.0


def cosine_alpha(step, total_steps, alpha0):
    """EMA momentum rising from ``alpha0`` at step 0 to exactly 1 at ``total_steps``."""
    if total_steps <= 0 or step >= total_steps:
        return 1.0
    return 1.0 - (1.0 - alpha0) * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def ema_update(teacher, student, alpha):
    """Leafwise ``alpha * teacher + (1 - alpha) * student`` over two state dicts."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if teacher.keys() != student.keys():
        missing = sorted(set(teacher) ^ set(student))
        raise ShapeError(f"teacher/student trees differ at leaves: {', '.join(missing)}")
    out = {}
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise ShapeError(f"leaf {name}: teacher shape {tuple(t.shape)} vs student {tuple(s.shape)}")
        if alpha == 1.0:
            out[name] = t.clone()
        else:
            out[name] = alpha * t + (1.0 - alpha) * s
    return out


def _state(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


def _check_finite(step, **losses):
    for name, value in losses.items():
        value = value.detach() if torch.is_tensor(value) else value
        if not math.isfinite(float(value)):
            raise DivergenceError(f"non-finite {name}", step=step)


@dataclass
class CheckpointPair:
    teacher: dict
    student: dict
    discriminator: dict
    optimizer: dict
    step: int
    stage: str
    config: TrainConfig
    meta: dict = field(default_factory=dict)
    history: list = field(default_factory=list, compare=False)

    def generator(self, which="teacher"):
        if which not in ("teacher", "student"):
            raise ConfigError(f"which must be 'teacher' or 'student', got {which!r}")
        gen = Generator(self.config)
        gen.load_state_dict(self.teacher if which == "teacher" else self.student)
        gen.eval()
        return gen

    def disc(self):
        d = Discriminator(self.config)
        d.load_state_dict(self.discriminator)
        d.eval()
        return d

    def tensors(self):
        out = {}
        for prefix, tree in (("teacher", self.teacher), ("student", self.student), ("disc", self.discriminator)):
            out.update({f"{prefix}/{k}": v for k, v in tree.items()})
        opt_meta = {}
        for opt_name, state in sorted(self.optimizer.items()):
            opt_meta[opt_name] = {"param_groups": state["param_groups"], "params": sorted(state["state"])}
            for idx in sorted(state["state"]):
                for key, value in sorted(state["state"][idx].items()):
                    out[f"opt/{opt_name}/{idx}/{key}"] = torch.as_tensor(value)
        return out, opt_meta

    def save(self, path):
        tensors, opt_meta = self.tensors()
        meta = {"step": self.step, "stage": self.stage, "config": self.config.to_dict(),
                "optimizer": opt_meta, "info": self.meta}
        ckpt_io.save(path, tensors, meta)

    @classmethod
    def load(cls, path):
        tensors, meta = ckpt_io.load(path)
        trees = {"teacher": {}, "student": {}, "disc": {}}
        opt = {name: {"state": {}, "param_groups": m["param_groups"]} for name, m in meta["optimizer"].items()}
        for name, value in tensors.items():
            prefix, _, rest = name.partition("/")
            if prefix == "opt":
                opt_name, idx, key = rest.split("/")
                opt[opt_name]["state"].setdefault(int(idx), {})[key] = value
            else:
                trees[prefix][rest] = value
        return cls(trees["teacher"], trees["student"], trees["disc"], opt, meta["step"], meta["stage"],
                   TrainConfig.from_dict(meta["config"]), meta.get("info", {}))


# warm-up stage


def warmup_train(manifest, bank, cfg):
    """Supervised + adversarial training of generator and discriminator on the labeled split."""
    labeled = Batchable.from_samples(manifest.subset("labeled"))
    if len(labeled) == 0:
        raise DataError("warm-up needs a non-empty labeled set")
    torch.manual_seed(cfg.seed)
    gen = Generator(cfg)
    disc = Discriminator(cfg)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr_start)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_start)
    protos = bank.voxels()
    adversarial = cfg.use_snm and cfg.lambda_d > 0
    shuffle = torch.Generator().manual_seed(derive_seed(cfg.seed, 1))
    noise = torch.Generator().manual_seed(derive_seed(cfg.seed, 2))

    spe = math.ceil(len(labeled) / cfg.batch_size)
    total = cfg.warmup_epochs * spe
    history, step = [], 0
    for epoch in range(cfg.warmup_epochs):
        order = torch.randperm(len(labeled), generator=shuffle)
        sums = {"rec": 0.0, "adv": 0.0, "disc": 0.0}
        for start in range(0, len(labeled), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = labeled.images[idx], labeled.voxels[idx]
            lr = cosine_lr(step, total, cfg.lr_start, cfg.lr_end)
            _set_lr(opt_g, lr)
            _set_lr(opt_d, lr)
            pred = gen(x, protos)
            d_val = 0.0
            if adversarial:
                fake = pred.detach()
                real = (y + (torch.rand(y.shape, generator=noise) * 2 - 1) * cfg.disc_noise).clamp(0.0, 1.0)
                l_d = disc_loss(disc, real, fake)
                opt_d.zero_grad()
                l_d.backward()
                opt_d.step()
                d_val = float(l_d.detach())

            l_rec = rec_loss(pred, y)
            loss = l_rec
            adv_val = 0.0
            if adversarial:
                l_adv = gen_adv_loss(disc, pred)
                loss = l_rec + cfg.lambda_d * l_adv
                adv_val = float(l_adv.detach())
            opt_g.zero_grad()
            loss.backward()
            opt_g.step()
            _check_finite(step, rec=l_rec, adv=adv_val, disc=d_val)
            n = len(idx)
            sums["rec"] += float(l_rec.detach()) * n
            sums["adv"] += adv_val * n
            sums["disc"] += d_val * n
            step += 1
        history.append({"epoch": epoch + 1, "step": step, "lr": lr,
                        **{k: v / len(labeled) for k, v in sums.items()}})
        logger.info("warmup epoch %d rec %.4f adv %.4f disc %.4f", epoch + 1,
                    history[-1]["rec"], history[-1]["adv"], history[-1]["disc"])

    state = _state(gen)
    result = CheckpointPair(
        teacher=state,
        student={k: v.clone() for k, v in state.items()},
        discriminator=_state(disc),
        optimizer={"generator": opt_g.state_dict(), "discriminator": opt_d.state_dict()},
        step=step,
        stage="warmup",
        config=cfg,
        meta={"categories": manifest.categories},
    )
    result.history = history
    return result


# mutual-learning stage


@torch.no_grad()
def pseudo_label(teacher, disc, prototypes, images, cfg, seeds=None, tokens=None):
    """Teacher prediction on weak views, binarized at ``delta``, with naturalness scores.

    Returns ``(labels, scores)``; labels are float {0, 1} grids.
    """
    if seeds is not None:
        images = augment_batch(images, seeds, "weak")
    soft = teacher(images, prototypes, tokens=tokens)
    labels = (soft > cfg.delta).to(soft.dtype)
    if disc is None:
        scores = torch.ones(len(labels), dtype=soft.dtype)
    else:
        scores = discriminate(disc, labels)
    return labels, scores


def _labeled_cycle(n, size, generator):
    """Endless stream of index chunks drawn from successive permutations."""
    buffer = []
    while True:
        while len(buffer) < size:
            buffer += torch.randperm(n, generator=generator).tolist()
        chunk, buffer = buffer[:size], buffer[size:]
        yield torch.tensor(chunk)


def mutual_step(student, optimizer, prototypes, labeled_batch, unlabeled_batch, labels, scores, cfg):
    """One student update on ``L_rec + lambda_u * L_unsup``; returns the loss terms.

    Inputs are already augmented; ``labels``/``scores`` are constants.
    """
    x_l, y_l = labeled_batch
    tokens = student.encode_prototypes(prototypes) if student.use_pam else None
    l_rec = rec_loss(student(x_l, tokens=tokens), y_l)
    loss = l_rec
    l_un = torch.zeros((), dtype=l_rec.dtype)
    if unlabeled_batch is not None and len(unlabeled_batch):
        pred_u = student(unlabeled_batch, tokens=tokens)
        l_un = unsup_loss(pred_u, labels, scores, kind=cfg.unsup_loss)
        loss = l_rec + cfg.lambda_u * l_un
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(l_rec.detach()), float(l_un.detach())


def mutual_train(checkpoint, manifest, bank, cfg=None, on_epoch=None):
    """Teacher-student training over labeled and unlabeled splits.

    Each step pairs ``batch_size/2`` labeled with ``batch_size/2`` unlabeled
    samples; one epoch is one pass over the unlabeled split. The teacher
    follows the student by EMA with a cosine momentum schedule; the
    discriminator is frozen. ``on_epoch(row, teacher, student)`` is called
    after every epoch.
    """
    if checkpoint is None or checkpoint.stage not in ("warmup", "mutual"):
        raise StageOrderError("mutual training needs a warm-up checkpoint")
    cfg = cfg or checkpoint.config
    torch.manual_seed(cfg.seed)
    teacher = checkpoint.generator("teacher")
    student = Generator(cfg)
    student.load_state_dict(checkpoint.student)
    student.train()
    for p in teacher.parameters():
        p.requires_grad_(False)
    disc = checkpoint.disc() if cfg.use_snm else None
    if disc is not None:
        for p in disc.parameters():
            p.requires_grad_(False)
    optimizer = torch.optim.Adam(student.parameters(), lr=cfg.lr_start)
    protos = bank.voxels()

    labeled = Batchable.from_samples(manifest.subset("labeled"))
    unlabeled = Batchable.from_samples(manifest.subset("unlabeled"))
    if len(labeled) == 0:
        raise DataError("mutual training needs a non-empty labeled set")
    half = cfg.batch_size // 2
    if len(unlabeled):
        spe = math.ceil(len(unlabeled) / half)
        lab_half = half
    else:
        spe = math.ceil(len(labeled) / cfg.batch_size)
        lab_half = cfg.batch_size
    total = cfg.mutual_epochs * spe
    shuffle = torch.Generator().manual_seed(derive_seed(cfg.seed, 3))
    lab_iter = _labeled_cycle(len(labeled), lab_half, shuffle)
    teacher_state = _state(teacher)

    history, step = [], 0
    for epoch in range(cfg.mutual_epochs):
        order = torch.randperm(len(unlabeled), generator=shuffle) if len(unlabeled) else None
        sums = {"rec": 0.0, "unsup": 0.0, "score": 0.0, "alpha": 0.0}
        for _ in range(spe):
            lr = cosine_lr(step, total, cfg.lr_start, cfg.lr_end)
            _set_lr(optimizer, lr)
            li = next(lab_iter)
            seeds_l = [derive_seed(cfg.seed, 4, step, j) for j in range(len(li))]
            x_l = augment_batch(labeled.images[li], seeds_l, "strong")
            batch_u, labels, scores = None, None, None
            if order is not None:
                ui = order[(step % spe) * half:(step % spe + 1) * half]
                raw_u = unlabeled.images[ui]
                seeds_w = [derive_seed(cfg.seed, 5, step, j) for j in range(len(ui))]
                seeds_s = [derive_seed(cfg.seed, 6, step, j) for j in range(len(ui))]
                labels, scores = pseudo_label(teacher, disc, protos, raw_u, cfg, seeds=seeds_w)
                if not cfg.use_score:
                    scores = torch.ones_like(scores)
                batch_u = augment_batch(raw_u, seeds_s, "strong")
            r, u = mutual_step(student, optimizer, protos, (x_l, labeled.voxels[li]), batch_u, labels, scores, cfg)
            _check_finite(step, rec=r, unsup=u)
            alpha = cosine_alpha(step, total, cfg.alpha0)
            teacher_state = ema_update(teacher_state, _state(student), alpha)
            teacher.load_state_dict(teacher_state)
            sums["rec"] += r
            sums["unsup"] += u
            sums["score"] += float(scores.mean()) if scores is not None else 0.0
            sums["alpha"] = alpha
            step += 1
        history.append({"epoch": epoch + 1, "step": step, "lr": lr, "rec": sums["rec"] / spe,
                        "unsup": sums["unsup"] / spe, "score": sums["score"] / spe, "alpha": sums["alpha"]})
        logger.info("mutual epoch %d rec %.4f unsup %.4f score %.3f", epoch + 1,
                    history[-1]["rec"], history[-1]["unsup"], history[-1]["score"])
        if on_epoch is not None:
            on_epoch(history[-1], teacher, student)

    result = CheckpointPair(
        teacher=teacher_state,
        student=_state(student),
        discriminator={k: v.clone() for k, v in checkpoint.discriminator.items()},
        optimizer={"student": optimizer.state_dict()},
        step=checkpoint.step + step,
        stage="mutual",
        config=cfg,
        meta=dict(checkpoint.meta),
    )
    result.history = history
    return result


# few-shot transfer


def fewshot_finetune(checkpoint, novel_samples, bank, cfg=None):
    """Supervised finetune of the teacher on a handful of novel-category pairs.

    ``bank`` must already include the novel prototypes.
    """
    cfg = cfg or checkpoint.config
    base = set(checkpoint.meta.get("categories", []))
    counts = {}
    for s in novel_samples:
        counts[s.category] = counts.get(s.category, 0) + 1
    overlap = base & set(counts)
    if overlap:
        raise ConfigError(f"novel categories overlap base categories: {', '.join(sorted(overlap))}")
    for c, n in counts.items():
        if n != cfg.fewshot_shots:
            raise ConfigError(f"category {c!r} has {n} novel pairs, expected exactly {cfg.fewshot_shots}")
    data = Batchable.from_samples(novel_samples)
    torch.manual_seed(cfg.seed)
    gen = checkpoint.generator("teacher")
    gen.train()
    optimizer = torch.optim.Adam(gen.parameters(), lr=cfg.lr_start)
    protos = bank.voxels()
    shuffle = torch.Generator().manual_seed(derive_seed(cfg.seed, 7))
    bs = min(cfg.batch_size, len(data))
    spe = math.ceil(len(data) / bs)
    total = cfg.fewshot_epochs * spe
    history, step = [], 0
    for epoch in range(cfg.fewshot_epochs):
        order = torch.randperm(len(data), generator=shuffle)
        running = 0.0
        for start in range(0, len(data), bs):
            idx = order[start:start + bs]
            _set_lr(optimizer, cosine_lr(step, total, cfg.lr_start, cfg.lr_end))
            loss = rec_loss(gen(data.images[idx], protos), data.voxels[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            _check_finite(step, rec=loss)
            running += float(loss.detach()) * len(idx)
            step += 1
        history.append({"epoch": epoch + 1, "step": step, "rec": running / len(data)})
    state = _state(gen)
    result = CheckpointPair(
        teacher=state,
        student={k: v.clone() for k, v in state.items()},
        discriminator={k: v.clone() for k, v in checkpoint.discriminator.items()},
        optimizer={"generator": optimizer.state_dict()},
        step=checkpoint.step + step,
        stage="fewshot",
        config=cfg,
        meta={**checkpoint.meta, "novel": sorted(counts)},
    )
    result.history = history
    return result
