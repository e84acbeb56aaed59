"""Voxel occupancy grids: validation, thresholding, IoU and the VOXL file format.

Grids are cubic numpy arrays of shape ``(r, r, r)`` in C order (last axis
fastest). Probability grids hold floats in [0, 1]; binary grids hold 0/1
in ``uint8`` (``bool`` is accepted on input).

VOXL layout::

    VOXL1\\n
    res <r>\\n
    mode <prob|bin>\\n
    <payload: r**3 values>

``prob`` payloads are little-endian float32, ``bin`` payloads one byte per
voxel (0x00 / 0x01). Trailing bytes are rejected.
"""

import logging
import os

import numpy as np

from .errors import ConfigError, FormatError, LengthError, ShapeError

logger = logging.getLogger(__name__)

MAGIC = b"VOXL1\n"
MODES = ("prob", "bin")


def resolution(grid):
    grid = np.asarray(grid)
    if grid.ndim != 3 or len(set(grid.shape)) != 1 or grid.shape[0] < 1:
        raise ShapeError(f"expected a cubic 3D grid, got shape {grid.shape}")
    return grid.shape[0]


def check_prob_grid(grid):
    grid = np.asarray(grid)
    resolution(grid)
    if not np.issubdtype(grid.dtype, np.floating):
        grid = grid.astype(np.float32)
    if not np.all((grid >= 0.0) & (grid <= 1.0)):
        raise ValueError("probability grid has entries outside [0, 1]")
    return grid


def check_binary_grid(grid):
    grid = np.asarray(grid)
    resolution(grid)
    if grid.dtype == np.bool_:
        return grid.astype(np.uint8)
    if not np.all((grid == 0) | (grid == 1)):
        raise ValueError("binary grid has entries other than 0 and 1")
    return grid.astype(np.uint8)


def is_binary(grid):
    grid = np.asarray(grid)
    return grid.dtype == np.bool_ or np.issubdtype(grid.dtype, np.integer)


def binarize(grid, delta):
    """Hard occupancy: 1 where ``grid > delta`` (strict), else 0."""
    if not 0.0 < delta < 1.0:
        raise ConfigError(f"invalid threshold {delta!r}: must lie in (0, 1)")
    grid = check_prob_grid(grid)
    return (grid > delta).astype(np.uint8)


def iou(pred, gt, t=0.3):
    """Intersection over union between ``pred > t`` and the occupied voxels of ``gt``.

    Both-empty grids agree perfectly and score 1.0.
    """
    if not 0.0 < t < 1.0:
        raise ConfigError(f"invalid threshold {t!r}: must lie in (0, 1)")
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"resolution mismatch: {pred.shape} vs {gt.shape}")
    resolution(pred)
    occupied = pred > t
    truth = gt.astype(bool)
    union = np.count_nonzero(occupied | truth)
    if union == 0:
        logger.info("iou: empty union, returning 1.0")
        return 1.0
    return np.count_nonzero(occupied & truth) / union


def occupancy(grid):
    grid = np.asarray(grid)
    return np.count_nonzero(grid) / grid.size


def write_voxl(grid, path):
    grid = np.asarray(grid)
    r = resolution(grid)
    if is_binary(grid):
        mode = "bin"
        payload = check_binary_grid(grid).tobytes(order="C")
    else:
        mode = "prob"
        payload = check_prob_grid(grid).astype("<f4").tobytes(order="C")
    header = MAGIC + f"res {r}\n".encode("ascii") + f"mode {mode}\n".encode("ascii")
    with open(os.fspath(path), "wb") as f:
        f.write(header + payload)


def _read_line(data, offset):
    end = data.find(b"\n", offset)
    if end < 0:
        raise FormatError("unterminated header line", offset)
    try:
        return data[offset:end].decode("ascii"), end + 1
    except UnicodeDecodeError:
        raise FormatError("non-ASCII header", offset) from None


def _keyed_value(line, key, offset):
    parts = line.split(" ")
    if len(parts) != 2 or parts[0] != key:
        raise FormatError(f"expected '{key} <value>' header line, got {line!r}", offset)
    return parts[1]


def parse_voxl(data):
    if not data.startswith(MAGIC):
        raise FormatError("bad magic, expected VOXL1", 0)
    offset = len(MAGIC)
    line, nxt = _read_line(data, offset)
    res = _keyed_value(line, "res", offset)
    if not res.isdigit() or int(res) < 1:
        raise FormatError(f"bad resolution {res!r}", offset)
    r = int(res)
    offset = nxt
    line, nxt = _read_line(data, offset)
    mode = _keyed_value(line, "mode", offset)
    if mode not in MODES:
        raise FormatError(f"unknown mode {mode!r}", offset)
    payload = data[nxt:]
    width = 4 if mode == "prob" else 1
    expected = r ** 3 * width
    if len(payload) != expected:
        raise LengthError(
            f"payload holds {len(payload)} bytes ({len(payload) / width:g} voxels), "
            f"expected {expected} bytes for resolution {r}"
        )
    if mode == "prob":
        grid = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    else:
        grid = np.frombuffer(payload, dtype=np.uint8).copy()
        bad = np.flatnonzero(grid > 1)
        if bad.size:
            raise FormatError("binary voxel byte is not 0x00/0x01", nxt + int(bad[0]))
    return grid.reshape(r, r, r)


def read_voxl(path):
    with open(os.fspath(path), "rb") as f:
        return parse_voxl(f.read())
