"""Seed derivation.

All randomness in the package flows from a single u64 seed. Independent
streams are derived by name so that consumers (data generation, tokenizer
fitting, parameter init, training, each decode segment) never share or race a
generator. Derivation is splittable and counter-based: a named path is hashed
into a SeedSequence spawn key over a Philox generator, so derived streams are
statistically independent and reproducible regardless of call order.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["derive_rng", "derive_seed"]

_MAX_U64 = 2**64 - 1


def _path_key(path: tuple[str | int, ...]) -> tuple[int, ...]:
    key = []
    for part in path:
        if isinstance(part, bool) or not isinstance(part, (int, str)):
            raise TypeError(f"rng path parts must be str or int, got {part!r}")
        if isinstance(part, int):
            if part < 0:
                raise ValueError(f"rng path ints must be nonnegative, got {part}")
            key.append(part)
        else:
            key.append(zlib.crc32(part.encode("utf-8")))
    return tuple(key)


def derive_rng(seed: int, *path: str | int) -> np.random.Generator:
    """Return a Generator for the stream named by `path` under `seed`.

    Same (seed, path) always yields the same stream; different paths yield
    independent streams.
    """
    if not 0 <= seed <= _MAX_U64:
        raise ValueError(f"seed must be a u64, got {seed}")
    seq = np.random.SeedSequence(entropy=seed, spawn_key=_path_key(path))
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(seed: int, *path: str | int) -> int:
    """Collapse a derived stream to a single u64, for handing to subprocesses."""
    return int(derive_rng(seed, *path).integers(0, _MAX_U64, dtype=np.uint64))
