"""Deterministic random streams built on the Philox4x64-10 counter generator.

Every consumer derives its own named stream from a 64-bit master seed:
the stream key is the low 128 bits of SHA-256(little-endian master seed
bytes + UTF-8 tag).  The construction is documented so another
implementation can reproduce identical streams; Philox itself is a
published, counter-based algorithm with no hidden state beyond
(key, counter, output buffer).
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_key", "stream", "get_state", "set_state"]


def derive_key(master_seed: int, tag: str) -> int:
    """128-bit Philox key from a master seed and a stream tag."""
    raw = int(master_seed).to_bytes(8, "little", signed=False) + tag.encode("utf-8")
    digest = hashlib.sha256(raw).digest()
    return int.from_bytes(digest[:16], "little")


def stream(master_seed: int, tag: str) -> np.random.Generator:
    """Independent generator for (master_seed, tag)."""
    return np.random.Generator(np.random.Philox(key=derive_key(master_seed, tag)))


def get_state(gen: np.random.Generator) -> dict:
    """Serializable snapshot of a Philox generator (JSON-safe ints)."""
    st = gen.bit_generator.state
    return {
        "counter": [int(v) for v in st["state"]["counter"]],
        "key": [int(v) for v in st["state"]["key"]],
        "buffer": [int(v) for v in st["buffer"]],
        "buffer_pos": int(st["buffer_pos"]),
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def set_state(gen: np.random.Generator, snap: dict) -> None:
    st = gen.bit_generator.state
    st["state"]["counter"] = np.array(snap["counter"], dtype=np.uint64)
    st["state"]["key"] = np.array(snap["key"], dtype=np.uint64)
    st["buffer"] = np.array(snap["buffer"], dtype=np.uint64)
    st["buffer_pos"] = snap["buffer_pos"]
    st["has_uint32"] = snap["has_uint32"]
    st["uinteger"] = snap["uinteger"]
    gen.bit_generator.state = st
