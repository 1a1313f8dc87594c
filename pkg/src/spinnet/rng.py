"""Deterministic, stream-keyed random number generation.

Every random draw in the library comes from a stream identified by a
64-bit (seed, stream_id) pair.  Stream ids are derived from a role string
plus an integer index with a stable hash, so the sequence produced by
(seed, role, index) is the same no matter in which order streams are
created or how work is distributed over worker processes.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _hash64(*parts: str) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(p.encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class RngStream:
    """Value-like handle for one deterministic sample sequence."""

    seed: int
    stream_id: int

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of the stream."""
        ss = np.random.SeedSequence((self.seed & _MASK64, self.stream_id & _MASK64))
        return np.random.Generator(np.random.PCG64(ss))


def stream(seed: int, role: str, index: int = 0) -> RngStream:
    """Stream keyed by (seed, role, index)."""
    return RngStream(seed & _MASK64, _hash64(role, str(int(index))))


def subseed(seed: int, role: str, index: int = 0) -> int:
    """Derive a 64-bit child seed, e.g. one per grid cell of an experiment."""
    return _hash64(str(seed & _MASK64), role, str(int(index)))


def generator_for(rng: RngStream | np.random.Generator) -> np.random.Generator:
    """Accept an RngStream or an already-built Generator."""
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")
