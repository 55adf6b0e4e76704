"""Splittable, portable random streams.

Every random draw in the toolkit comes from a :class:`RngStream` derived from
``(seed, labels)``. The generator is SplitMix64, which is counter based, so
blocks of draws are produced with vectorised ``uint64`` arithmetic and still
match the scalar sequence bit for bit.
"""

from __future__ import annotations

from typing import Iterable, MutableSequence, Sequence

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class RngStream:
    """SplitMix64 stream keyed by a seed and an ordered list of labels.

    The initial state is one SplitMix64 step applied to
    ``seed ^ fnv1a64("/".join(labels))``. Draws then follow the ordinary
    SplitMix64 recurrence.
    """

    __slots__ = ("seed", "labels", "state")

    def __init__(self, seed: int, labels: Sequence[str] = ()):
        self.seed = int(seed) & MASK64
        self.labels = tuple(str(label) for label in labels)
        key = fnv1a64("/".join(self.labels).encode("utf-8"))
        self.state = mix64(((self.seed ^ key) + GOLDEN_GAMMA) & MASK64)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, labels={list(self.labels)!r})"

    def child(self, *labels: object) -> "RngStream":
        """Stream for a sub-unit of work; independent of this stream's position."""
        return RngStream(self.seed, self.labels + tuple(str(x) for x in labels))

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return mix64(self.state)

    def u64_array(self, n: int) -> np.ndarray:
        """The next ``n`` draws as a ``uint64`` array (same values as ``next_u64``)."""
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GOLDEN_GAMMA)
            out = _mix64_array(z)
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return out

    def below(self, n: int) -> int:
        """Bounded integer in ``[0, n)`` via ``next_u64 mod n``."""
        if n <= 0:
            raise ValueError("bound must be positive")
        return self.next_u64() % n

    def integers(self, n: int, size: int) -> np.ndarray:
        """``size`` bounded integers in ``[0, n)``, each ``next_u64 mod n``."""
        if n <= 0:
            raise ValueError("bound must be positive")
        return (self.u64_array(size) % np.uint64(n)).astype(np.int64)

    def uniform(self, size: int | tuple[int, ...] = None) -> np.ndarray | float:
        """Doubles in ``[0, 1)`` from the top 53 bits of each draw."""
        if size is None:
            return (self.next_u64() >> 11) * 2.0**-53
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape))
        bits = self.u64_array(n) >> np.uint64(11)
        return (bits.astype(np.float64) * 2.0**-53).reshape(shape)

    def uniform_open_left(self, size: int) -> np.ndarray:
        """Doubles in ``(0, 1]``."""
        return 1.0 - self.uniform(size)

    def normal(self, size: int | tuple[int, ...]) -> np.ndarray:
        """Standard normal draws by Box-Muller, two uniforms per sample."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape))
        u = self.uniform(2 * n).reshape(n, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        return (radius * np.cos(2.0 * np.pi * u[:, 1])).reshape(shape)

    def shuffle(self, items: MutableSequence) -> MutableSequence:
        """In-place Fisher-Yates shuffle, descending index order."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def permutation(self, n: int) -> list[int]:
        return self.shuffle(list(range(n)))

    def sample(self, population: Sequence, k: int) -> list:
        """``k`` distinct elements, order as drawn (partial Fisher-Yates)."""
        pool = list(population)
        if k > len(pool):
            raise ValueError(f"cannot draw {k} items from {len(pool)}")
        out = []
        for _ in range(k):
            j = self.below(len(pool))
            out.append(pool.pop(j))
        return out


def stream(seed: int, labels: Iterable[str] = ()) -> RngStream:
    return RngStream(seed, tuple(labels))
