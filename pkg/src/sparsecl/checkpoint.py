"""SPCL1 checkpoint container.

Layout (all integers little-endian)::

    b"SPCL1"  | u32 version | u32 meta_len | meta (UTF-8 JSON, sorted keys)
    u32 n_arrays, then per array:
        u16 name_len | name (UTF-8) | u8 ndim | u64 dims[ndim] | f64 data (C order)

Arrays are keyed by name: model parameters under their registry names, plus any
extra state (masks, score maps, MAS state, buffer contents) under prefixed
names. Everything is stored as float64, so integer arrays must stay below 2**53.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import SchemaError
from .model import BlockSpec, Model

MAGIC = b"SPCL1"
VERSION = 1


def write_container(path, arrays, meta=None):
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<HB", len(nb), arr.ndim) + nb)
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_container(path):
    buf = Path(path).read_bytes()
    if buf[:5] != MAGIC:
        raise SchemaError(f"{path}: not an SPCL1 container")
    version, meta_len = struct.unpack_from("<II", buf, 5)
    if version != VERSION:
        raise SchemaError(f"{path}: unsupported container version {version}")
    pos = 13
    meta = json.loads(buf[pos:pos + meta_len].decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        name_len, ndim = struct.unpack_from("<HB", buf, pos)
        pos += 3
        name = buf[pos:pos + name_len].decode()
        pos += name_len
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    if pos != len(buf):
        raise SchemaError(f"{path}: {len(buf) - pos} trailing bytes")
    return arrays, meta


def model_meta(model):
    return {"spec": {"width": model.spec.width, "expansion": model.spec.expansion,
                     "block_count": model.spec.block_count},
            "input_dim": model.input_dim, "num_classes": model.num_classes}


def save_checkpoint(path, model, extra=None, meta=None):
    arrays = {e.name: model[e.name] for e in model.registry}
    for name, arr in (extra or {}).items():
        if name in arrays:
            raise SchemaError(f"extra array {name!r} collides with a parameter name")
        arrays[name] = arr
    full_meta = {"model": model_meta(model)}
    full_meta.update(meta or {})
    write_container(path, arrays, full_meta)


def load_checkpoint(path):
    """Return ``(model, extra_arrays, meta)``."""
    arrays, meta = read_container(path)
    try:
        mm = meta["model"]
        spec = BlockSpec(**mm["spec"])
        model = Model(spec, mm["input_dim"], mm["num_classes"])
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: bad model metadata ({exc})") from exc
    for e in model.registry:
        if e.name not in arrays:
            raise SchemaError(f"{path}: missing parameter {e.name!r}")
        arr = arrays.pop(e.name)
        if arr.shape != e.shape:
            raise SchemaError(f"{path}: {e.name} has shape {arr.shape}, expected {e.shape}")
        model[e.name][...] = arr
    return model, arrays, meta
