"""SplitMix64 streams shared by key generation, training, subset selection and attacks.

Every stochastic component in the package draws from an :class:`RngStream`.
SplitMix64 is counter based (output ``n`` is ``mix(seed + n * GAMMA)``), so long
runs of draws are produced with vectorised uint64 arithmetic instead of a
Python loop.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """SplitMix64 finaliser on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


class RngStream:
    """Single-owner SplitMix64 stream.

    ``seed`` is kept so that :meth:`derive` depends only on the seed and the
    label, never on how far the parent has advanced.
    """

    algorithm = "splitmix64"

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be a non-negative 64-bit integer")
        self.seed = seed & MASK64
        self.state = self.seed

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed:#018x}, state={self.state:#018x})"

    def derive(self, label: bytes | str) -> "RngStream":
        if isinstance(label, str):
            label = label.encode("utf-8")
        digest = hashlib.blake2b(
            self.seed.to_bytes(8, "little") + label, digest_size=8
        ).digest()
        return RngStream(mix64(int.from_bytes(digest, "little")))

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def u64s(self, n: int) -> np.ndarray:
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GAMMA)
            out = _mix64_array(steps + np.uint64(self.state))
        self.state = (self.state + n * GAMMA) & MASK64
        return out

    def uniforms(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) built from the top 53 bits of each draw."""
        return (self.u64s(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normals(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller, two uniforms per output."""
        u = self.uniforms(2 * n).reshape(2, n) if n > 0 else np.zeros((2, 0))
        radius = np.sqrt(-2.0 * np.log1p(-u[0]))
        return radius * np.cos(2.0 * np.pi * u[1])

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = ((1 << 64) // n) * n
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def randbelow_array(self, bounds: np.ndarray) -> np.ndarray:
        """One unbiased draw in [0, bounds[i]) per entry; same law as :meth:`randbelow`."""
        bounds = np.asarray(bounds, dtype=np.uint64)
        if np.any(bounds == 0):
            raise ValueError("bounds must be positive")
        # 2**64 // b == (2**64 - b) // b + 1, computed without overflow
        limits = ((np.uint64(0) - bounds) // bounds + np.uint64(1)) * bounds
        out = np.empty(bounds.shape, dtype=np.uint64)
        todo = np.arange(bounds.size)
        flat_b, flat_l = bounds.ravel(), limits.ravel()
        flat_out = out.reshape(-1)
        while todo.size:
            r = self.u64s(todo.size)
            # limit == 0 encodes 2**64 (b a power of two): never reject
            ok = (flat_l[todo] == 0) | (r < flat_l[todo])
            flat_out[todo[ok]] = r[ok] % flat_b[todo[ok]]
            todo = todo[~ok]
        return out.astype(np.int64)

    def signs(self, shape) -> np.ndarray:
        """Uniform draws from {-1.0, +1.0}."""
        n = int(np.prod(shape))
        bits = self.u64s(n) >> np.uint64(63)
        return (bits.astype(np.float64) * 2.0 - 1.0).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``, high index first."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.asarray(perm, dtype=np.int64)


def uniform_subset(rng: RngStream, n: int, s: int) -> list[int]:
    """Uniform ``s``-subset of ``range(n)`` (Floyd's algorithm), returned sorted."""
    if not 1 <= s <= n:
        raise ValueError(f"invalid subset size S={s} for N={n}")
    chosen: set[int] = set()
    for j in range(n - s, n):
        t = rng.randbelow(j + 1)
        chosen.add(j if t in chosen else t)
    return sorted(chosen)


def uniform_subset_masks(rng: RngStream, n: int, s: int, count: int) -> np.ndarray:
    """``count`` independent Floyd draws as a boolean (count, n) membership mask."""
    if not 1 <= s <= n:
        raise ValueError(f"invalid subset size S={s} for N={n}")
    mask = np.zeros((count, n), dtype=bool)
    rows = np.arange(count)
    for j in range(n - s, n):
        t = rng.randbelow_array(np.full(count, j + 1))
        taken = mask[rows, t]
        mask[rows, np.where(taken, j, t)] = True
    return mask
