"""Versioned binary checkpoints (magic RLFT, little-endian).

Layout: magic, format version, role tag, a JSON metadata blob, epoch,
named Philox stream snapshots, name-length-prefixed tensor records, and
optional Adam moments.  Serialization is canonical, so save -> load ->
save is byte-identical and training resumes bit-exactly.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

__all__ = ["Checkpoint", "CheckpointError", "save_checkpoint", "load_checkpoint"]

MAGIC = b"RLFT"
VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8"}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_RNG_FIELDS = 13  # counter[4], key[2], buffer[4], buffer_pos, has_uint32, uinteger


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    role: str
    meta: dict
    epoch: int
    params: dict            # name -> np.ndarray
    rng_states: dict        # stream name -> snapshot dict
    opt_state: Optional[dict] = None  # {"t": int, "m": {...}, "v": {...}}


def _w_bytes(fh, raw: bytes) -> None:
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _w_str(fh, s: str) -> None:
    _w_bytes(fh, s.encode("utf-8"))


def _r_exact(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(raw)}")
    return raw


def _r_bytes(fh) -> bytes:
    (n,) = struct.unpack("<I", _r_exact(fh, 4))
    return _r_exact(fh, n)


def _r_str(fh) -> str:
    return _r_bytes(fh).decode("utf-8")


def _rng_to_u64s(snap: dict) -> list[int]:
    return (list(snap["counter"]) + list(snap["key"]) + list(snap["buffer"])
            + [snap["buffer_pos"], snap["has_uint32"], snap["uinteger"]])


def _rng_from_u64s(vals) -> dict:
    return {
        "counter": list(vals[0:4]),
        "key": list(vals[4:6]),
        "buffer": list(vals[6:10]),
        "buffer_pos": int(vals[10]),
        "has_uint32": int(vals[11]),
        "uinteger": int(vals[12]),
    }


def _w_array(fh, name: str, arr: np.ndarray) -> None:
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
    _w_str(fh, name)
    fh.write(struct.pack("<BB", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr).astype(_DTYPES[code], copy=False).tobytes())


def _r_array(fh) -> tuple[str, np.ndarray]:
    name = _r_str(fh)
    code, ndim = struct.unpack("<BB", _r_exact(fh, 2))
    if code not in _DTYPES:
        raise CheckpointError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{ndim}I", _r_exact(fh, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    dt = np.dtype(_DTYPES[code])
    raw = _r_exact(fh, count * dt.itemsize)
    return name, np.frombuffer(raw, dtype=dt).reshape(shape).copy()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _w_str(buf, ckpt.role)
    _w_str(buf, json.dumps(ckpt.meta, sort_keys=True))
    buf.write(struct.pack("<I", ckpt.epoch))
    buf.write(struct.pack("<I", len(ckpt.rng_states)))
    for name in ckpt.rng_states:
        _w_str(buf, name)
        buf.write(struct.pack(f"<{_RNG_FIELDS}Q", *_rng_to_u64s(ckpt.rng_states[name])))
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        _w_array(buf, name, arr)
    if ckpt.opt_state is None:
        buf.write(struct.pack("<I", 0))
    else:
        names = list(ckpt.opt_state["m"])
        buf.write(struct.pack("<I", len(names)))
        buf.write(struct.pack("<Q", ckpt.opt_state["t"]))
        for name in names:
            _w_array(buf, name, ckpt.opt_state["m"][name])
            _w_array(buf, name, ckpt.opt_state["v"][name])
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, expected_role: Optional[str] = None) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = _r_exact(fh, 4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _r_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        role = _r_str(fh)
        if expected_role is not None and role != expected_role:
            raise CheckpointError(f"{path}: role {role!r} does not match expected {expected_role!r}")
        meta = json.loads(_r_str(fh))
        (epoch,) = struct.unpack("<I", _r_exact(fh, 4))
        (n_rng,) = struct.unpack("<I", _r_exact(fh, 4))
        rng_states = {}
        for _ in range(n_rng):
            name = _r_str(fh)
            vals = struct.unpack(f"<{_RNG_FIELDS}Q", _r_exact(fh, 8 * _RNG_FIELDS))
            rng_states[name] = _rng_from_u64s(vals)
        (n_params,) = struct.unpack("<I", _r_exact(fh, 4))
        params = {}
        for _ in range(n_params):
            name, arr = _r_array(fh)
            params[name] = arr
        (n_opt,) = struct.unpack("<I", _r_exact(fh, 4))
        opt_state = None
        if n_opt:
            (t,) = struct.unpack("<Q", _r_exact(fh, 8))
            m, v = {}, {}
            for _ in range(n_opt):
                name, arr = _r_array(fh)
                m[name] = arr
                name2, arr2 = _r_array(fh)
                if name2 != name:
                    raise CheckpointError(f"{path}: moment records out of order ({name!r} vs {name2!r})")
                v[name] = arr2
            opt_state = {"t": t, "m": m, "v": v}
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError(f"{path}: trailing bytes after checkpoint payload")
    return Checkpoint(role=role, meta=meta, epoch=epoch, params=params,
                      rng_states=rng_states, opt_state=opt_state)
