"""Binary checkpoint files.

Layout (all integers little-endian):
  magic "DSCK" | version u32 | config blob (u32 length + UTF-8 JSON)
  | named-tensor table | optimizer flag u8 | optional optimizer table.

A table is: count u32, then per entry name (u32 length + bytes), rank u32,
dims (u32 each), dtype flag u8 (4 = float32, 8 = float64), raw data.
"""

from __future__ import annotations

import json
import struct
from typing import Dict, Optional, Tuple

import numpy as np

MAGIC = b"DSCK"
VERSION = 1


def _write_table(fh, arrays: Dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        fh.write(struct.pack("<I", len(nb)))
        fh.write(nb)
        fh.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            fh.write(struct.pack("<I", dim))
        if arr.dtype == np.float64:
            fh.write(struct.pack("<B", 8))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        else:
            fh.write(struct.pack("<B", 4))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_table(fh) -> Dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", fh.read(4))
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", fh.read(4))
        name = fh.read(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", fh.read(4))
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
        (flag,) = struct.unpack("<B", fh.read(1))
        if flag == 8:
            dt, width = "<f8", 8
        elif flag == 4:
            dt, width = "<f4", 4
        else:
            raise ValueError(f"bad dtype flag {flag} for tensor {name!r}")
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(fh.read(width * n), dtype=dt).reshape(dims)
        out[name] = arr.astype(np.float64) if flag == 8 else arr.astype(np.float32)
    return out


def save_checkpoint(path, config: dict, arrays: Dict[str, np.ndarray],
                    optimizer: Optional[Dict[str, np.ndarray]] = None) -> None:
    blob = json.dumps(config, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        _write_table(fh, arrays)
        if optimizer is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            _write_table(fh, optimizer)


def load_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray],
                                   Optional[Dict[str, np.ndarray]]]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (blen,) = struct.unpack("<I", fh.read(4))
        config = json.loads(fh.read(blen).decode("utf-8"))
        arrays = _read_table(fh)
        (flag,) = struct.unpack("<B", fh.read(1))
        optimizer = _read_table(fh) if flag else None
    return config, arrays, optimizer


def module_arrays(module) -> Dict[str, np.ndarray]:
    return {name: p.data for name, p in module.named_parameters()}


def load_module_arrays(module, arrays: Dict[str, np.ndarray]) -> None:
    """Copy stored tensors into a structurally matching module."""
    named = dict(module.named_parameters())
    missing = set(named) - set(arrays)
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)[:4]}...")
    for name, p in named.items():
        src = arrays[name]
        if tuple(src.shape) != tuple(p.data.shape):
            raise ValueError(
                f"parameter {name!r}: checkpoint shape {src.shape} does not "
                f"match model shape {p.data.shape}")
        p.data[...] = src.astype(p.data.dtype)
