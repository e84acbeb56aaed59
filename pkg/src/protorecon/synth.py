"""Procedural image/voxel dataset: shape generators, a depth renderer,
photometric augmentations and the labeled/unlabeled/test manifest."""

import dataclasses
import logging
import math
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import voxel as vx
from .config import parse_kv_file, coerce_fields
from .errors import ConfigError, DataError, FormatError, LengthError

logger = logging.getLogger(__name__)

CATEGORIES = ("block-stack", "tube", "slab-legs", "sphere-cap")
IMG_MAGIC = b"IMGL1\n"
OCCUPANCY_RANGE = (0.02, 0.6)


def _rng(*keys):
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def _category_key(category):
    return zlib.crc32(category.encode("utf-8"))


def _coords(r):
    c = (np.arange(r) + 0.5) / r
    return np.meshgrid(c, c, c, indexing="ij")


def _box(x, y, z, lo, hi):
    return (
        (x >= lo[0]) & (x <= hi[0])
        & (y >= lo[1]) & (y <= hi[1])
        & (z >= lo[2]) & (z <= hi[2])
    )


def _block_stack(rng, x, y, z):
    n_blocks = int(rng.integers(1, 4))
    occ = np.zeros(x.shape, dtype=bool)
    base = 0.05
    half_w = rng.uniform(0.3, 0.42)
    half_d = rng.uniform(0.3, 0.42)
    for _ in range(n_blocks):
        height = rng.uniform(0.18, 0.85 / n_blocks)
        cx = 0.5 + rng.uniform(-0.05, 0.05)
        cz = 0.5 + rng.uniform(-0.05, 0.05)
        occ |= _box(x, y, z, (cx - half_w, base, cz - half_d), (cx + half_w, base + height, cz + half_d))
        base += height
        half_w *= rng.uniform(0.55, 0.8)
        half_d *= rng.uniform(0.55, 0.8)
    return occ


def _tube(rng, x, y, z):
    mode = int(rng.integers(0, 3))
    if mode == 0:  # tall and thin
        outer, height = rng.uniform(0.2, 0.28), rng.uniform(0.75, 0.9)
    elif mode == 1:  # short and wide
        outer, height = rng.uniform(0.36, 0.45), rng.uniform(0.25, 0.4)
    else:
        outer, height = rng.uniform(0.28, 0.38), rng.uniform(0.5, 0.7)
    wall = rng.uniform(0.09, 0.14)
    rad = np.hypot(x - 0.5, z - 0.5)
    y0 = 0.5 - height / 2
    return (rad <= outer) & (rad >= outer - wall) & (y >= y0) & (y <= y0 + height)


def _slab_legs(rng, x, y, z):
    mode = int(rng.integers(0, 3))
    half_w = rng.uniform(0.3, 0.44)
    half_d = rng.uniform(0.25, 0.42)
    top = rng.uniform(0.5, 0.75)
    thick = rng.uniform(0.08, 0.14)
    occ = _box(x, y, z, (0.5 - half_w, top - thick, 0.5 - half_d), (0.5 + half_w, top, 0.5 + half_d))
    leg = rng.uniform(0.1, 0.15)
    if mode == 0:  # four corner legs
        for sx in (-1, 1):
            for sz in (-1, 1):
                cx = 0.5 + sx * (half_w - leg / 2)
                cz = 0.5 + sz * (half_d - leg / 2)
                occ |= _box(x, y, z, (cx - leg / 2, 0.0, cz - leg / 2), (cx + leg / 2, top, cz + leg / 2))
    elif mode == 1:  # two side panels
        for sx in (-1, 1):
            cx = 0.5 + sx * (half_w - leg / 2)
            occ |= _box(x, y, z, (cx - leg / 2, 0.0, 0.5 - half_d), (cx + leg / 2, top, 0.5 + half_d))
    else:  # pedestal on a foot
        occ |= _box(x, y, z, (0.5 - leg, 0.0, 0.5 - leg), (0.5 + leg, top, 0.5 + leg))
        foot = rng.uniform(0.2, 0.3)
        occ |= _box(x, y, z, (0.5 - foot, 0.0, 0.5 - foot), (0.5 + foot, 0.1, 0.5 + foot))
    return occ


def _sphere_cap(rng, x, y, z):
    mode = int(rng.integers(0, 3))
    radius = rng.uniform(0.3, 0.45)
    base_h = rng.uniform(0.06, 0.12)
    rad = np.hypot(x - 0.5, z - 0.5)
    if mode == 0:  # dome on a flat disc
        y0 = base_h
        occ = (rad <= radius + 0.04) & (y <= base_h)
    elif mode == 1:  # dome on a stem
        y0 = rng.uniform(0.3, 0.45)
        stem = rng.uniform(0.08, 0.13)
        occ = (rad <= stem) & (y <= y0)
        occ |= (rad <= radius * 0.8) & (y <= base_h)
    else:  # bare dome
        y0 = 0.05
        occ = np.zeros(x.shape, dtype=bool)
    dist = np.sqrt((x - 0.5) ** 2 + (y - y0) ** 2 + (z - 0.5) ** 2)
    return occ | ((dist <= radius) & (y >= y0))


_GENERATORS = {
    "block-stack": _block_stack,
    "tube": _tube,
    "slab-legs": _slab_legs,
    "sphere-cap": _sphere_cap,
}


def generate_shape(category, seed, r_v=16, categories=CATEGORIES):
    """Deterministic binary shape of ``category`` at resolution ``r_v``."""
    if category not in categories or category not in _GENERATORS:
        valid = ", ".join(c for c in categories if c in _GENERATORS)
        raise ConfigError(f"unknown category {category!r}; valid categories: {valid}")
    x, y, z = _coords(r_v)
    lo, hi = OCCUPANCY_RANGE
    for attempt in range(64):
        rng = _rng(_category_key(category), seed, attempt)
        occ = _GENERATORS[category](rng, x, y, z)
        frac = occ.mean()
        if lo <= frac <= hi:
            return occ.astype(np.uint8)
    raise DataError(f"could not draw a {category} shape within occupancy {OCCUPANCY_RANGE} at r_v={r_v}")


def render_view(voxels, azimuth, elevation, size=32, step=0.25):
    """Orthographic depth image of a binary grid.

    Hit pixels hold ``1 - 0.9 * t / t_max`` (nearer is brighter, always >= 0.1);
    pixels whose ray misses the shape are 0. The image plane spans
    ``1.5 * r`` voxels so the grid stays in frame under any azimuth.
    """
    if size < 16:
        raise ConfigError(f"image size must be >= 16, got {size}")
    occ = vx.check_binary_grid(voxels).astype(bool)
    r = occ.shape[0]
    az, el = math.radians(azimuth), math.radians(elevation)
    forward = np.array([math.sin(az) * math.cos(el), -math.sin(el), math.cos(az) * math.cos(el)])
    right = np.array([math.cos(az), 0.0, -math.sin(az)])
    up = np.cross(forward, right)

    half = 0.75 * r
    ticks = -half + (np.arange(size) + 0.5) * (2 * half / size)
    u = ticks[None, :]
    v = ticks[::-1][:, None]
    reach = r * math.sqrt(3) / 2
    origin = r / 2 + u[..., None] * right + v[..., None] * up - reach * forward  # (size, size, 3)
    n_steps = int(math.ceil(2 * reach / step)) + 1
    t = np.arange(n_steps) * step
    pts = origin[:, :, None, :] + t[None, None, :, None] * forward  # (size, size, n, 3)
    idx = np.floor(pts).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < r), axis=-1)
    idx = np.clip(idx, 0, r - 1)
    hit = inside & occ[idx[..., 0], idx[..., 1], idx[..., 2]]
    any_hit = hit.any(axis=-1)
    first = hit.argmax(axis=-1)
    depth = t[first] / t[-1]
    image = np.where(any_hit, 1.0 - 0.9 * depth, 0.0)
    return image.astype(np.float32)


def weak_augment(image, seed):
    rng = _rng(seed, 1)
    return np.clip(image * rng.uniform(0.95, 1.05), 0.0, 1.0).astype(np.float32)


def strong_augment(image, seed, return_box=False):
    """Brightness/contrast jitter, Gaussian noise, then one zero-filled cutout.

    The cutout box ``(row, col, height, width)`` covers at most a quarter of
    the image. Pixel geometry is never moved.
    """
    rng = _rng(seed, 2)
    image = np.asarray(image, dtype=np.float64)
    mean = image.mean()
    out = (image - mean) * rng.uniform(0.7, 1.3) + mean
    out = out * rng.uniform(0.7, 1.3)
    out = out + rng.normal(0.0, 0.05, size=image.shape)
    out = np.clip(out, 0.0, 1.0)
    h, w = image.shape[:2]
    bh = int(rng.integers(1, h // 2 + 1))
    bw = int(rng.integers(1, w // 2 + 1))
    top = int(rng.integers(0, h - bh + 1))
    left = int(rng.integers(0, w - bw + 1))
    out[top:top + bh, left:left + bw] = 0.0
    out = out.astype(np.float32)
    if return_box:
        return out, (top, left, bh, bw)
    return out


# image files


def write_imgl(image, path):
    image = np.asarray(image, dtype="<f4")
    if image.ndim == 3 and image.shape[-1] == 1:
        image = image[..., 0]
    h, w = image.shape
    with open(os.fspath(path), "wb") as f:
        f.write(IMG_MAGIC + f"size {h} {w}\n".encode("ascii") + image.tobytes(order="C"))


def read_imgl(path):
    with open(os.fspath(path), "rb") as f:
        data = f.read()
    if not data.startswith(IMG_MAGIC):
        raise FormatError("bad magic, expected IMGL1", 0)
    start = len(IMG_MAGIC)
    end = data.find(b"\n", start)
    parts = data[start:end].decode("ascii", "replace").split(" ") if end > 0 else []
    if len(parts) != 3 or parts[0] != "size" or not (parts[1].isdigit() and parts[2].isdigit()):
        raise FormatError("expected 'size <h> <w>' header line", start)
    h, w = int(parts[1]), int(parts[2])
    payload = data[end + 1:]
    if len(payload) != 4 * h * w:
        raise LengthError(f"image payload holds {len(payload)} bytes, expected {4 * h * w}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float32)


# dataset


@dataclass
class DataConfig:
    categories: tuple = CATEGORIES
    n_train: int = 500  # per category
    n_test: int = 50  # per category
    r_v: int = 16
    image_size: int = 32
    ratio: float = 0.10
    seed: int = 0
    split_seed: int = 0
    azimuth_range: tuple = (0.0, 360.0)
    elevation_range: tuple = (10.0, 40.0)

    def __post_init__(self):
        coerce_fields(self)
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError(f"ratio must lie in (0, 1], got {self.ratio}")
        if self.n_train < 1 or self.n_test < 0:
            raise ConfigError("n_train must be >= 1 and n_test >= 0")
        for c in self.categories:
            if c not in _GENERATORS:
                raise ConfigError(f"unknown category {c!r}; valid categories: {', '.join(CATEGORIES)}")

    @classmethod
    def from_file(cls, path, **overrides):
        values = parse_kv_file(path)
        values.update(overrides)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise ConfigError(f"unknown data config keys: {', '.join(sorted(unknown))}")
        return cls(**values)


@dataclass
class ShapeSample:
    id: str
    category: str
    voxel: np.ndarray
    image: np.ndarray
    azimuth: float
    elevation: float


@dataclass
class DatasetManifest:
    samples: list
    labeled_ids: list
    unlabeled_ids: list
    test_ids: list
    ratio: float
    seed: int
    root: Path = None
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self._index = {s.id: s for s in self.samples}

    def __getitem__(self, sample_id):
        return self._index[sample_id]

    def split_of(self, sample_id):
        if sample_id in set(self.labeled_ids):
            return "labeled"
        if sample_id in set(self.unlabeled_ids):
            return "unlabeled"
        return "test"

    def subset(self, split):
        ids = {"labeled": self.labeled_ids, "unlabeled": self.unlabeled_ids, "test": self.test_ids}[split]
        return [self._index[i] for i in ids]

    @property
    def categories(self):
        return sorted({s.category for s in self.samples})

    def restrict(self, categories):
        """Copy holding only samples of ``categories`` (splits preserved)."""
        keep = set(categories)
        samples = [s for s in self.samples if s.category in keep]
        ids = {s.id for s in samples}
        return DatasetManifest(
            samples=samples,
            labeled_ids=[i for i in self.labeled_ids if i in ids],
            unlabeled_ids=[i for i in self.unlabeled_ids if i in ids],
            test_ids=[i for i in self.test_ids if i in ids],
            ratio=self.ratio,
            seed=self.seed,
            root=self.root,
        )

    def write(self, out_dir):
        """Write VOXL/IMGL files and ``manifest.tsv``; return the manifest path."""
        out_dir = Path(out_dir)
        (out_dir / "voxels").mkdir(parents=True, exist_ok=True)
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        split = {i: "labeled" for i in self.labeled_ids}
        split.update({i: "unlabeled" for i in self.unlabeled_ids})
        split.update({i: "test" for i in self.test_ids})
        lines = [f"# ratio={self.ratio!r}", f"# seed={self.seed}"]
        for s in self.samples:
            img_rel = f"images/{s.id}.imgl"
            vox_rel = f"voxels/{s.id}.voxl"
            write_imgl(s.image, out_dir / img_rel)
            vx.write_voxl(s.voxel, out_dir / vox_rel)
            lines.append("\t".join([s.id, s.category, split[s.id], img_rel, vox_rel, repr(s.azimuth), repr(s.elevation)]))
        path = out_dir / "manifest.tsv"
        path.write_text("\n".join(lines) + "\n")
        self.root = out_dir
        return path

    @classmethod
    def read(cls, path):
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        root = path.parent
        samples, splits = [], {"labeled": [], "unlabeled": [], "test": []}
        meta = {"ratio": "1.0", "seed": "0"}
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key.strip()] = value.strip()
                continue
            fields = line.split("\t")
            if len(fields) != 7:
                raise DataError(f"{path}:{lineno}: expected 7 tab-separated fields, got {len(fields)}")
            sid, category, split, img_rel, vox_rel, az, el = fields
            if split not in splits:
                raise DataError(f"{path}:{lineno}: unknown split {split!r}")
            samples.append(ShapeSample(
                id=sid,
                category=category,
                voxel=vx.read_voxl(root / vox_rel),
                image=read_imgl(root / img_rel),
                azimuth=float(az),
                elevation=float(el),
            ))
            splits[split].append(sid)
        return cls(samples, splits["labeled"], splits["unlabeled"], splits["test"],
                   ratio=float(meta["ratio"]), seed=int(meta["seed"]), root=root)


def _allocate(counts, ratio):
    """Per-category labeled quotas summing to round(ratio * total) (largest remainder)."""
    total = sum(counts.values())
    target = int(math.floor(ratio * total + 0.5))
    exact = {c: ratio * n for c, n in counts.items()}
    quota = {c: min(counts[c], int(math.floor(v))) for c, v in exact.items()}
    order = sorted(counts, key=lambda c: (-(exact[c] - math.floor(exact[c])), c))
    i = 0
    while sum(quota.values()) < target:
        c = order[i % len(order)]
        if quota[c] < counts[c]:
            quota[c] += 1
        i += 1
    return quota


def build_dataset(config, out_dir=None):
    """Generate samples and the seeded, category-stratified split."""
    if not isinstance(config, DataConfig):
        config = DataConfig(**config)
    samples, train_ids, test_ids = [], {}, []
    for category in config.categories:
        train_ids[category] = []
        for index in range(config.n_test + config.n_train):
            sid = f"{category}-{index:05d}"
            rng = _rng(config.seed, _category_key(category), index, 7)
            shape_seed = int(rng.integers(0, 2 ** 31))
            grid = generate_shape(category, shape_seed, config.r_v, config.categories)
            az = float(rng.uniform(*config.azimuth_range))
            el = float(rng.uniform(*config.elevation_range))
            image = render_view(grid, az, el, config.image_size)
            samples.append(ShapeSample(sid, category, grid, image, az, el))
            if index < config.n_test:
                test_ids.append(sid)
            else:
                train_ids[category].append(sid)

    quota = _allocate({c: len(ids) for c, ids in train_ids.items()}, config.ratio)
    labeled, unlabeled = [], []
    for category in config.categories:
        ids = train_ids[category]
        rng = _rng(config.split_seed, _category_key(category), 11)
        chosen = set(rng.choice(len(ids), size=quota[category], replace=False).tolist())
        labeled += [sid for j, sid in enumerate(ids) if j in chosen]
        unlabeled += [sid for j, sid in enumerate(ids) if j not in chosen]

    manifest = DatasetManifest(samples, labeled, unlabeled, test_ids, config.ratio, config.split_seed)
    if out_dir is not None:
        manifest.write(out_dir)
    return manifest
