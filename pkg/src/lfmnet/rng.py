"""Seeded, path-addressed random streams.

Every random draw in this package comes from an :class:`RngStream`, which
couples a 64-bit seed with a path of purpose tags (strings and non-negative
integers). Identical ``(seed, path)`` pairs always yield identical draw
sequences; distinct paths give statistically independent streams. Consumers
derive children per purpose / epoch / sample index, so per-sample work can run
in any order (or in parallel) without changing results.

Scalar conventions: every scalar draw consumes exactly one raw double from
the stream; ``uniform(a, b)`` maps it to the half-open interval ``[a, b)``
via ``a + (b - a) * u`` and ``uniform_int(n)`` to ``{0, ..., n-1}`` via
``floor(u * n)`` (bias is O(n * 2**-53), irrelevant at the sizes used here).
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1
_BUF_SIZE = 512


def _encode_part(part) -> tuple[int, int]:
    # Two words per part: a domain tag plus the payload, so the integer 7 and
    # a string hashing to 7 can never collide.
    if isinstance(part, (int, np.integer)):
        value = int(part)
        if value < 0:
            raise ValueError(f"stream path integers must be >= 0, got {value}")
        return (1, value)
    if isinstance(part, str):
        digest = hashlib.sha256(part.encode("utf-8")).digest()
        return (2, int.from_bytes(digest[:8], "little"))
    raise TypeError(f"stream path parts must be int or str, got {type(part).__name__}")


class RngStream:
    """A deterministic random stream addressed by (seed, path)."""

    __slots__ = ("seed", "path", "_gen", "_buf", "_pos")

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed) & _MASK64
        self.path = tuple(path)
        self._gen = None
        self._buf = None
        self._pos = 0

    def child(self, *parts) -> "RngStream":
        """Derive the independent substream at ``path + parts``."""
        return RngStream(self.seed, self.path + parts)

    def _generator(self) -> np.random.Generator:
        if self._gen is None:
            entropy = [self.seed]
            for part in self.path:
                entropy.extend(_encode_part(part))
            self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
        return self._gen

    def _next_double(self) -> float:
        # Raw doubles are prefetched in blocks; pops are plain list reads.
        pos = self._pos
        buf = self._buf
        if buf is None or pos >= _BUF_SIZE:
            buf = self._generator().random(_BUF_SIZE).tolist()
            self._buf = buf
            pos = 0
        self._pos = pos + 1
        return buf[pos]

    # -- scalar draws (one raw double each) ----------------------------------

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        """One double from [low, high)."""
        return low + (high - low) * self._next_double()

    def uniform_int(self, n: int) -> int:
        """One integer from [0, n)."""
        return int(self._next_double() * n)

    # -- vector draws ---------------------------------------------------------

    def uniforms(self, low: float, high: float, size) -> np.ndarray:
        return self._generator().uniform(low, high, size)

    def integers(self, n: int, size) -> np.ndarray:
        return self._generator().integers(n, size=size)

    def normals(self, mean: float, std: float, size) -> np.ndarray:
        return self._generator().normal(mean, std, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def sample_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct integers drawn uniformly from [0, n), in draw order."""
        if k == 0:
            return np.empty(0, dtype=np.int64)
        return self._generator().choice(n, size=k, replace=False).astype(np.int64)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path!r})"
