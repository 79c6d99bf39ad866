"""Binary checkpoint format: header, checksum, config block, named parameter
blocks (little-endian float64). Loads are all-or-nothing; any corruption is
rejected before a single parameter is touched.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .engine import ParamRegistry, ShapeError, Tensor

MAGIC = b"FKDC"
VERSION = 1


class IntegrityError(IOError):
    """Checksum or structural mismatch in a checkpoint file."""


def _pack_params(entries) -> bytes:
    out = bytearray()
    out += struct.pack("<I", len(entries))
    for name, data, trainable in entries:
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", 1 if trainable else 0)
        # note: asarray (unlike ascontiguousarray) keeps 0-d arrays 0-d
        arr = np.asarray(data, dtype="<f8", order="C")
        out += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            out += struct.pack("<I", dim)
        out += arr.tobytes()
    return bytes(out)


def save_checkpoint(path, config: dict,
                    registries: dict[str, ParamRegistry]) -> None:
    """Write config plus every registry's parameters under a name prefix."""
    entries = []
    for prefix, reg in registries.items():
        for name, p in reg.items():
            entries.append((f"{prefix}.{name}", p.data, reg.is_trainable(name)))
    cfg_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    payload = struct.pack("<Q", len(cfg_bytes)) + cfg_bytes + _pack_params(entries)
    digest = hashlib.sha256(payload).digest()
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<I", VERSION) + digest + payload)


def load_checkpoint(path):
    """Returns (config, params) where params maps name -> (array, trainable)."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 + 4 + 32 or blob[:4] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != VERSION:
        raise IntegrityError(f"{path}: unsupported version {version}")
    digest = blob[8:40]
    payload = blob[40:]
    if hashlib.sha256(payload).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch (corrupt or truncated)")
    off = 0
    (cfg_len,) = struct.unpack_from("<Q", payload, off)
    off += 8
    config = json.loads(payload[off:off + cfg_len].decode("utf-8"))
    off += cfg_len
    (count,) = struct.unpack_from("<I", payload, off)
    off += 4
    params: dict[str, tuple[np.ndarray, bool]] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", payload, off)
        off += 2
        name = payload[off:off + nlen].decode("utf-8")
        off += nlen
        trainable = payload[off] == 1
        off += 1
        ndim = payload[off]
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", payload, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=off)
        off += 8 * size
        params[name] = (arr.reshape(shape).astype(np.float64), trainable)
    if off != len(payload):
        raise IntegrityError(f"{path}: trailing bytes after parameter blocks")
    return config, params


def restore_registry(reg: ParamRegistry, params: dict, prefix: str) -> None:
    """Copy checkpointed values into an existing registry, shape-checked."""
    for name, p in reg.items():
        key = f"{prefix}.{name}"
        if key not in params:
            raise IntegrityError(f"checkpoint missing parameter {key}")
        arr, _trainable = params[key]
        if arr.shape != p.data.shape:
            raise ShapeError(
                f"checkpoint parameter {key} has shape {arr.shape}, "
                f"model expects {p.data.shape}"
            )
        p.data[...] = arr
