"""Hierarchically seeded random streams.

All randomness goes through Philox4x64-10, a 64-bit counter-based generator
(Salmon et al., 2011) as shipped in numpy. Its round constants are fixed in
the algorithm definition (multipliers 0xD2E7470EE14C6C93 and
0xCA5A826395121157, Weyl increments 0x9E3779B97F4A7C15 and
0xBB67AE8584CAA73B), so a given key reproduces the same stream on every
platform.

A stream is identified by a master seed plus a path such as
``("noise", 17)``. The path is folded into the key through
:class:`numpy.random.SeedSequence`, which makes every component reproducible
in isolation: the augmentations of sample 17 do not depend on how many other
samples were processed first.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["stream", "derive_seed", "as_generator"]


def _path_words(path) -> tuple[int, ...]:
    words = []
    for part in path:
        if isinstance(part, (int, np.integer)):
            if part < 0:
                raise ValueError(f"stream path integers must be non-negative, got {part}")
            words.append(int(part))
        else:
            words.append(zlib.crc32(str(part).encode("utf-8")))
    return tuple(words)


def stream(seed: int, *path) -> np.random.Generator:
    """Return an independent Philox generator for ``(seed, *path)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_path_words(path))
    key = ss.generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed: int, *path) -> int:
    """Derive a child integer seed (63 bits) for ``(seed, *path)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_path_words(path))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return stream(int(seed))
