"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      4 bytes  b"LPYR"
    version    u32      currently 1
    cfg_len    u32      length of the UTF-8 JSON config that follows
    cfg        bytes    JSON object
    count      u32      number of tensors
    then per tensor:
      name_len u16, name (UTF-8)
      dtype    u8       0 = float32, 1 = float64
      ndim     u8, dims u32 * ndim
      data     little-endian, C order
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = b"LPYR"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def write_tensors(path, config: dict, tensors: Dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_tensors(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        return _parse(blob)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc


def _parse(blob: bytes):
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic; not a lappyr checkpoint")
    version, cfg_len = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    config = json.loads(blob[off : off + cfg_len].decode("utf-8"))
    off += cfg_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for tensor {name!r}")
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if off + nbytes > len(blob):
            raise CheckpointError(f"truncated data for tensor {name!r}")
        tensors[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes after last tensor")
    return config, tensors


def save_nets(path, net_a, net_s, extra: dict | None = None) -> None:
    """Both networks in one file, parameters prefixed ``albedo.`` / ``shading.``."""
    config = {"albedo": net_a.config.to_dict(), "shading": net_s.config.to_dict(),
              "dtype": str(net_a.dtype), **(extra or {})}
    tensors = {}
    for prefix, net in (("albedo", net_a), ("shading", net_s)):
        for name, p in net.parameters().items():
            tensors[f"{prefix}.{name}"] = p.data
    write_tensors(path, config, tensors)


def load_nets(path):
    from .network import LapPyrNet, NetConfig

    config, tensors = read_tensors(path)
    nets = []
    try:
        for prefix in ("albedo", "shading"):
            net = LapPyrNet(NetConfig(**config[prefix]), np.dtype(config.get("dtype", "float32")))
            for name, p in net.parameters().items():
                arr = tensors[f"{prefix}.{name}"]
                if arr.shape != p.shape:
                    raise CheckpointError(f"shape mismatch for {prefix}.{name}: {arr.shape} vs {p.shape}")
                p.data = arr.astype(net.dtype)
            nets.append(net)
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint {path} is missing {exc}") from exc
    return nets[0], nets[1], config
