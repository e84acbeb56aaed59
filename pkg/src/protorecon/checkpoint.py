"""Versioned binary container for named tensors plus JSON metadata.

Layout (all integers little-endian)::

    b"PRCK1\\n"
    uint64      header length H
    H bytes     UTF-8 JSON header, keys sorted:
                {"version": 1, "meta": {...},
                 "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload     raw C-order little-endian tensor bytes, concatenated in
                header order; ``offset`` is relative to the payload start

Writing the same tensors and metadata always yields the same bytes.
"""

import json
import os
import struct

import numpy as np
import torch

from .errors import FormatError, LengthError

MAGIC = b"PRCK1\n"
VERSION = 1
_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


def dumps(tensors, meta=None):
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes(order="C")
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"version": VERSION, "meta": meta or {}, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def loads(data):
    if not data.startswith(MAGIC):
        raise FormatError("bad magic, expected PRCK1", 0)
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise LengthError("truncated checkpoint header")
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    try:
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("unreadable JSON header", pos) from None
    if not isinstance(header, dict) or header.get("version") != VERSION:
        version = header.get("version") if isinstance(header, dict) else None
        raise FormatError(f"unsupported checkpoint version {version!r}", pos)
    payload = data[pos + hlen:]
    tensors = {}
    total = 0
    for e in header["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise LengthError(f"tensor {e['name']} truncated")
        arr = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr).to(_TORCH[e["dtype"]])
        total += e["nbytes"]
    if total != len(payload):
        raise LengthError(f"checkpoint payload has {len(payload) - total} unexpected trailing bytes")
    return tensors, header["meta"]


def save(path, tensors, meta=None):
    data = dumps(tensors, meta)
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(os.fspath(path), "wb") as f:
        f.write(data)


def load(path):
    with open(os.fspath(path), "rb") as f:
        return loads(f.read())
