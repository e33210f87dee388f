"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic  b"REDC"
    u32    format version (currently 1)
    u32    length of the UTF-8 JSON metadata blob
    bytes  metadata JSON (model config plus caller extras)
    u32    number of array entries
    per entry:
        u16    path length, then the UTF-8 path
        u8     dtype code (0 = float64, 1 = float32, 2 = int64)
        u8     ndim
        u32*n  extents
        bytes  raw little-endian payload

Round-tripping a checkpoint is bitwise exact.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .model import ModelParameters, config_from_dict, config_to_dict

__all__ = ["save_arrays", "load_arrays", "save_model", "load_model", "CheckpointError"]

_MAGIC = b"REDC"
_VERSION = 1

_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1, np.dtype("<i8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: Dict[str, np.ndarray], meta: Optional[dict] = None) -> Path:
    """Write named arrays plus a JSON metadata blob; keys are written sorted."""
    path = Path(path)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            le = arr.dtype.newbyteorder("<")
            if le not in _DTYPE_CODES:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for array {name!r}")
            arr = arr.astype(le, copy=False)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", _DTYPE_CODES[le], arr.ndim))
            for extent in arr.shape:
                f.write(struct.pack("<I", extent))
            f.write(arr.tobytes())
    return path


def load_arrays(path) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint file not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != _MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic {blob[:4]!r})")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", blob, 8)
    off = 12
    meta = json.loads(blob[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        code, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, off) if ndim else ()
        off += 4 * ndim
        dtype = _CODE_DTYPES.get(code)
        if dtype is None:
            raise CheckpointError(f"{path}: unknown dtype code {code} for array {name!r}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        arrays[name] = np.frombuffer(blob[off : off + nbytes], dtype=dtype).reshape(shape).copy()
        off += nbytes
    return arrays, meta


def _stats_arrays(params: ModelParameters) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    for bn_path, st in params.bn_stats.items():
        out[f"{bn_path}/running_mean"] = st.mean
        out[f"{bn_path}/running_var"] = st.var
        out[f"{bn_path}/updates"] = np.asarray(st.updates, dtype=np.int64)
    return out


def save_model(path, params: ModelParameters, extra_arrays: Optional[Dict[str, np.ndarray]] = None,
               extra_meta: Optional[dict] = None) -> Path:
    """Serialize parameters, batch-norm stats and the model config."""
    arrays = {p: t.data for p, t in params.items()}
    arrays.update(_stats_arrays(params))
    if extra_arrays:
        arrays.update(extra_arrays)
    meta = {
        "kind": "model",
        "config": config_to_dict(params.config),
        "dtype": params.dtype.name,
    }
    if extra_meta:
        meta.update(extra_meta)
    return save_arrays(path, arrays, meta)


def load_model(path) -> Tuple[ModelParameters, Dict[str, np.ndarray], dict]:
    """Rebuild ModelParameters from a checkpoint.

    Returns (params, leftover arrays that are not model state, metadata).
    """
    arrays, meta = load_arrays(path)
    if "config" not in meta:
        raise CheckpointError(f"{path}: checkpoint carries no model config")
    config = config_from_dict(meta["config"])
    params = ModelParameters(config, dtype=np.dtype(meta.get("dtype", "float64")))
    for p, t in params.items():
        if p not in arrays:
            raise CheckpointError(f"{path}: checkpoint is missing parameter {p!r}")
        arr = arrays.pop(p)
        if arr.shape != t.data.shape:
            raise CheckpointError(
                f"{path}: parameter {p!r} has shape {arr.shape}, expected {t.data.shape}"
            )
        t.data = arr.astype(params.dtype, copy=False)
    for bn_path, st in params.bn_stats.items():
        try:
            st.mean = arrays.pop(f"{bn_path}/running_mean").astype(params.dtype, copy=False)
            st.var = arrays.pop(f"{bn_path}/running_var").astype(params.dtype, copy=False)
            st.updates = int(arrays.pop(f"{bn_path}/updates"))
        except KeyError as e:
            raise CheckpointError(f"{path}: checkpoint is missing running stats {e}") from None
    return params, arrays, meta
