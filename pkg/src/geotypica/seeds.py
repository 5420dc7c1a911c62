"""Deterministic child-seed derivation for the generation pipeline.

Every random decision in the pipeline draws from a generator obtained via
``rng_for(master, *path)``, where ``path`` names the consumer (for example
``("lot", plot_id, lot_index)`` or ``("view", 3, "sun")``). Child streams are
independent of the order in which they are created, so inserting one lot or
view does not reshuffle randomness elsewhere.

The derivation is counter-based: each path component is mapped to a 32-bit
integer (CRC-32 for strings, value mod 2**32 for ints) and the resulting
tuple is used as the ``spawn_key`` of a ``numpy.random.SeedSequence`` rooted
at the master seed. The mapping is documented in docs/formats.md and must not
change between releases, or golden outputs will shift.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["spawn_key", "seed_sequence", "rng_for"]


def _component(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"seed path components must be non-negative, got {part}")
        return int(part) % (2**32)
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"unsupported seed path component {part!r}")


def spawn_key(*path) -> tuple[int, ...]:
    """Map a seed path to the numpy SeedSequence spawn key."""
    return tuple(_component(p) for p in path)


def seed_sequence(master: int, *path) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(master), spawn_key=spawn_key(*path))


def rng_for(master: int, *path) -> np.random.Generator:
    """Independent generator for one named consumer under ``master``."""
    return np.random.default_rng(seed_sequence(master, *path))
