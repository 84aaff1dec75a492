"""Deterministic random streams.

Every random draw in the package comes from a Philox counter-based generator
keyed by SHA-256(seed, purpose path).  Streams for different purposes
("instance", "rollout", "ant", ...) are statistically independent and do not
depend on call order or thread scheduling, so results are reproducible from
the seed alone.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(seed: int, path: tuple[str, ...]) -> int:
    """128-bit Philox key from a seed and a purpose path."""
    text = str(int(seed)) + "\x1f" + "\x1f".join(path)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def derive_seed(seed: int, *labels: object) -> int:
    """63-bit integer seed derived from a base seed and labels.

    Used where an API takes a plain seed (e.g. per-epoch instance generation).
    """
    key = derive_key(seed, tuple(str(x) for x in labels))
    return key & 0x7FFF_FFFF_FFFF_FFFF


class RandomStream:
    """Handle to one derived random stream.

    ``child(*labels)`` derives an independent sub-stream; ``generator()``
    returns a fresh numpy Generator positioned at the start of the stream.
    Creating the same stream twice yields identical draws.
    """

    __slots__ = ("seed", "path")

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(str(p) for p in path)

    def child(self, *labels: object) -> "RandomStream":
        return RandomStream(self.seed, self.path + tuple(str(x) for x in labels))

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=derive_key(self.seed, self.path)))

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, path={'/'.join(self.path) or '.'})"
