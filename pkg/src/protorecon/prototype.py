"""Prototype shape priors: a voxel autoencoder, Lloyd k-means over its
latents, and the bank of decoded cluster centres."""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import voxel as vx
from .errors import DataError, InsufficientDataError
from .losses import rec_loss
from .nets import VoxelDecoder, VoxelEncoder

logger = logging.getLogger(__name__)


class AutoEncoder(nn.Module):
    def __init__(self, r_v=16, latent=128, channels=(8, 16, 32)):
        super().__init__()
        self.r_v = r_v
        self.latent = latent
        self.encoder = VoxelEncoder(channels, latent, r_v)
        self.decoder = VoxelDecoder(latent, tuple(reversed(channels)), r_v)

    def encode(self, voxels):
        return self.encoder(voxels)

    def decode(self, z):
        return self.decoder(z)

    def forward(self, voxels):
        return self.decode(self.encode(voxels))


def _as_voxel_tensor(voxels):
    arr = np.stack([np.asarray(v, dtype=np.float32) for v in voxels])
    return torch.from_numpy(arr).unsqueeze(1)


def train_autoencoder(voxels, categories, cfg):
    """Fit an :class:`AutoEncoder` to labeled shapes by minimizing voxel BCE.

    Returns ``(model, history)`` where ``history`` lists the mean training
    loss before training and after every epoch.
    """
    counts = {}
    for c in categories:
        counts[c] = counts.get(c, 0) + 1
    for c, n in sorted(counts.items()):
        if n < cfg.k:
            raise InsufficientDataError(f"category {c!r} has {n} labeled shapes, need at least k={cfg.k}")
    torch.manual_seed(cfg.seed)
    model = AutoEncoder(cfg.r_v, cfg.ae_latent, cfg.enc3d_channels)
    data = _as_voxel_tensor(voxels)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.ae_lr)
    gen = torch.Generator().manual_seed(cfg.seed)

    def mean_loss():
        with torch.no_grad():
            return float(rec_loss(model(data), data))

    history = [mean_loss()]
    for epoch in range(cfg.ae_epochs):
        order = torch.randperm(len(data), generator=gen)
        for start in range(0, len(data), cfg.ae_batch_size):
            batch = data[order[start:start + cfg.ae_batch_size]]
            loss = rec_loss(model(batch), batch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        history.append(mean_loss())
        logger.debug("ae epoch %d loss %.5f", epoch + 1, history[-1])
    return model, history


@dataclass
class KMeansResult:
    centers: np.ndarray
    assignments: np.ndarray
    sse_history: list
    n_iter: int

    @property
    def sse(self):
        return self.sse_history[-1]


def _sq_dists(x, centers):
    return ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)


def _kmeanspp(x, k, rng):
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.choice([i for i in range(n) if i not in chosen]))
        chosen.append(idx)
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return x[chosen].copy()


def _sse(x, centers, assign):
    return float(((x - centers[assign]) ** 2).sum())


def lloyd_kmeans(features, k, seed=0, max_iter=100):
    """k-means++ seeding followed by Lloyd iterations in float64.

    Stops at an assignment fixpoint or after ``max_iter`` updates. The SSE is
    recorded after every assignment and every centre update; an empty
    cluster is re-seeded at the point farthest from its centre.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"features must be a 2D array, got shape {x.shape}")
    if len(x) < k or k < 1:
        raise InsufficientDataError(f"k-means needs at least k={k} points, got {len(x)}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, k, rng)
    assign = None
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        new = _sq_dists(x, centers).argmin(axis=1)
        counts = np.bincount(new, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            dist = ((x - centers[new]) ** 2).sum(axis=1)
            dist[counts[new] < 2] = -1.0
            far = int(dist.argmax())
            counts[new[far]] -= 1
            new[far] = empty
            counts[empty] = 1
            centers[empty] = x[far]
        history.append(_sse(x, centers, new))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        centers = np.stack([x[assign == j].mean(axis=0) for j in range(k)])
        history.append(_sse(x, centers, assign))
    return KMeansResult(centers, assign, history, n_iter)


@dataclass
class PrototypeEntry:
    category: str
    cluster_index: int
    voxel: np.ndarray


@dataclass
class PrototypeBank:
    entries: list
    k: int
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self):
        return len(self.entries)

    @property
    def categories(self):
        return sorted({e.category for e in self.entries})

    def voxels(self, dtype=torch.float32):
        return _as_voxel_tensor([e.voxel for e in self.entries]).to(dtype)

    def features(self, generator):
        """Prototype tokens from ``generator``'s 3D encoder, cached until its parameters change."""
        params = list(generator.encoder3d.parameters())
        key = tuple((id(p), p._version, p.dtype) for p in params)
        if self._cache.get("key") != key:
            with torch.no_grad():
                tokens = generator.encode_prototypes(self.voxels(params[0].dtype))
            self._cache = {"key": key, "tokens": tokens}
        return self._cache["tokens"]

    def extend(self, entries):
        merged = self.entries + list(entries)
        merged.sort(key=lambda e: (e.category, e.cluster_index))
        return PrototypeBank(merged, self.k)

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        lines = [f"# k={self.k}"]
        for e in self.entries:
            name = f"{e.category}-{e.cluster_index}.voxl"
            vx.write_voxl(e.voxel, out_dir / name)
            lines.append(f"{e.category}\t{e.cluster_index}\t{name}")
        (out_dir / "index.tsv").write_text("\n".join(lines) + "\n")
        return out_dir / "index.tsv"

    @classmethod
    def read(cls, bank_dir):
        bank_dir = Path(bank_dir)
        index = bank_dir / "index.tsv"
        if not index.exists():
            raise DataError(f"bank index not found: {index}")
        k, entries = 0, []
        for line in index.read_text().splitlines():
            if line.startswith("# k="):
                k = int(line[4:])
            elif line.strip():
                category, cluster, name = line.split("\t")
                entries.append(PrototypeEntry(category, int(cluster), vx.read_voxl(bank_dir / name)))
        return cls(entries, k)


def _category_prototypes(ae, category, voxels, k, seed, delta):
    data = _as_voxel_tensor(voxels)
    with torch.no_grad():
        latents = ae.encode(data).double()
        result = lloyd_kmeans(latents.numpy(), k, seed)
        decoded = ae.decode(torch.from_numpy(result.centers).to(data.dtype))
    entries = []
    for j in range(k):
        proto = vx.binarize(decoded[j, 0].numpy(), delta)
        if not proto.any():
            nearest = int(((latents.numpy() - result.centers[j]) ** 2).sum(axis=1).argmin())
            logger.warning("prototype %s/%d decoded empty; using nearest labeled shape", category, j)
            proto = vx.check_binary_grid(voxels[nearest])
        entries.append(PrototypeEntry(category, j, proto))
    return entries


def build_prototype_bank(manifest, ae, k=3, seed=0, delta=0.3):
    """Cluster each category's labeled shapes in latent space and decode the centres."""
    by_cat = {}
    for s in manifest.subset("labeled"):
        by_cat.setdefault(s.category, []).append(s.voxel)
    if not by_cat:
        raise InsufficientDataError("no labeled samples to build prototypes from")
    ae.eval()
    entries = []
    for category in sorted(by_cat):
        if len(by_cat[category]) < k:
            raise InsufficientDataError(f"category {category!r} has {len(by_cat[category])} labeled shapes, need k={k}")
        entries += _category_prototypes(ae, category, by_cat[category], k, seed, delta)
    return PrototypeBank(entries, k)


def novel_prototypes(ae, category, voxels, k=3, seed=0, delta=0.3):
    return _category_prototypes(ae, category, list(voxels), k, seed, delta)
