"""Versioned binary container for named tensors plus a JSON header.

Layout::

    b"XGANCKPT" | uint32 version | uint64 header length | header (UTF-8 JSON) | tensor bytes

The header holds a free-form ``meta`` dict, a ``kind`` tag and one entry per
tensor (name, dtype, shape, byte offset).  Tensor data follows the header
back to back in header order, little-endian.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Dict, Tuple

import numpy as np
import torch

MAGIC = b"XGANCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")

_DTYPES = {
    "float32": (torch.float32, np.float32),
    "float64": (torch.float64, np.float64),
    "int64": (torch.int64, np.int64),
}


class CheckpointError(RuntimeError):
    """A container could not be read or does not match what the caller expects."""


def write_container(path, kind: str, meta: dict, tensors: Dict[str, torch.Tensor]) -> int:
    """Write ``tensors`` to ``path``; returns the header length in bytes."""
    entries = []
    blobs = []
    offset = 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        dtype = str(t.dtype).replace("torch.", "")
        if dtype not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {dtype}")
        arr = t.numpy()
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(t.shape), "offset": offset,
                        "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"kind": kind, "meta": meta, "tensors": entries}, sort_keys=True).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)
    return len(header)


def read_container(path, kind: str = None) -> Tuple[dict, Dict[str, torch.Tensor]]:
    """Return ``(meta, tensors)``; raises :class:`CheckpointError` on any defect."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated container")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not an xgan container (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"{path}: container version {version}, expected {VERSION}")
    start = _PREFIX.size + hlen
    try:
        header = json.loads(raw[_PREFIX.size:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header") from e
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path}: container holds '{header.get('kind')}', expected '{kind}'")
    tensors = {}
    for e in header["tensors"]:
        name = e["name"]
        if e["dtype"] not in _DTYPES:
            raise CheckpointError(f"{path}: tensor '{name}' has unsupported dtype {e['dtype']}")
        np_dtype = np.dtype(_DTYPES[e["dtype"]][1]).newbyteorder("<")
        lo = start + e["offset"]
        hi = lo + e["nbytes"]
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        if hi > len(raw) or n * np_dtype.itemsize != e["nbytes"]:
            raise CheckpointError(f"{path}: tensor '{name}' is truncated or mis-sized")
        arr = np.frombuffer(raw[lo:hi], dtype=np_dtype).reshape(e["shape"])
        tensors[name] = torch.from_numpy(arr.astype(np_dtype.newbyteorder("="), copy=True))
    return header["meta"], tensors


def load_into(module: torch.nn.Module, tensors: Dict[str, torch.Tensor], prefix: str = "",
              source: str = "checkpoint") -> None:
    """Copy ``prefix + name`` tensors into ``module``'s parameters, validating every shape."""
    own = dict(module.state_dict())
    missing = [n for n in own if prefix + n not in tensors]
    if missing:
        raise CheckpointError(f"{source}: missing parameter '{missing[0]}'")
    with torch.no_grad():
        for n, p in own.items():
            t = tensors[prefix + n]
            if tuple(t.shape) != tuple(p.shape):
                raise CheckpointError(f"{source}: shape mismatch for '{n}': "
                                      f"{tuple(t.shape)} vs {tuple(p.shape)}")
            if t.dtype != p.dtype:
                raise CheckpointError(f"{source}: dtype mismatch for '{n}': {t.dtype} vs {p.dtype}")
            p.copy_(t)
