"""
RNG Module - Counter-based, splittable random streams
Built on numpy's Philox bit generator: the same (seed, stream, counter) yields
the same draws on every platform, and named substreams never overlap.
"""

import hashlib
from typing import Optional, Sequence, Tuple

import numpy as np

_MASK64 = (1 << 64) - 1


def _child_key(parent: int, name: str) -> int:
    payload = parent.to_bytes(8, "little") + name.encode("utf-8")
    digest = hashlib.blake2b(payload, digest_size=8, person=b"RngStream").digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """
    A reproducible random stream.

    Args:
        seed: 64-bit seed (first Philox key word)
        stream: stream identifier (second Philox key word); substreams created
            with split() get distinct identifiers, so their sequences are disjoint
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._bitgen = np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))
        self._generator = np.random.Generator(self._bitgen)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream:#x}, counter={self.counter})"

    @property
    def counter(self) -> int:
        """Low word of the Philox block counter (advances as draws are consumed)."""
        return int(self._bitgen.state["state"]["counter"][0])

    def split(self, name: str) -> "RngStream":
        """
        Derive an independent named substream, e.g. rng.split("noise").

        The child key hashes the parent key with the name, so nested splits
        depend on their order and never return to an ancestor.
        """
        return RngStream(self.seed, _child_key(self.stream, name))

    def spawn(self, count: int, name: str = "child") -> Tuple["RngStream", ...]:
        """Per-index substreams for index-parallel work."""
        return tuple(self.split(f"{name}/{i}") for i in range(count))

    # ---------- draws ----------
    def normal(self, shape: Sequence[int] = ()) -> np.ndarray:
        return self._generator.standard_normal(tuple(shape))

    def uniform(self, low=0.0, high=1.0, shape: Sequence[int] = ()) -> np.ndarray:
        return self._generator.uniform(low, high, tuple(shape))

    def integers(self, low: int, high: int, shape: Sequence[int] = ()) -> np.ndarray:
        """Integers in [low, high)."""
        return self._generator.integers(low, high, tuple(shape))

    def choice(self, n: int, size: int, p: Optional[np.ndarray] = None) -> np.ndarray:
        return self._generator.choice(n, size=size, p=p)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def rademacher(self, shape: Sequence[int]) -> np.ndarray:
        return self._generator.integers(0, 2, tuple(shape)).astype(np.float64) * 2.0 - 1.0
