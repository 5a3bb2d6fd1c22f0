"""Sobol points in natural (non Gray-code) order with random digital shifts.

Direction numbers come from the Joe & Kuo ``new-joe-kuo-6.21201`` table, which
scipy ships as ``scipy/stats/_sobol_direction_numbers.npz``. Coordinate 0 is
the base-2 van der Corput sequence. Points are held as 53-bit integers so a
digital shift (bitwise XOR) is exact and converts losslessly to float64: the
base sequence fills the top 32 bits and a shift randomizes all 53.
"""

from __future__ import annotations

import functools
import os

import numpy as np

from .rng import RandomStream

SOBOL_BITS = 32
POINT_BITS = 53
MAX_DIMENSION = 21201
_SCALE = 2.0**-POINT_BITS


@functools.lru_cache(maxsize=1)
def _joe_kuo_table():
    import scipy.stats

    path = os.path.join(os.path.dirname(scipy.stats.__file__), "_sobol_direction_numbers.npz")
    with np.load(path) as data:
        return data["poly"].copy(), data["vinit"].copy()


@functools.lru_cache(maxsize=8)
def direction_numbers(dimension: int) -> np.ndarray:
    """Direction numbers ``V[b, j]`` (53-bit scaled) for bits ``b`` and coordinates ``j``."""
    if not 1 <= dimension <= MAX_DIMENSION:
        raise ValueError(f"Sobol dimension must be in [1, {MAX_DIMENSION}], got {dimension}")
    poly, vinit = _joe_kuo_table()
    m = np.zeros((SOBOL_BITS, dimension), dtype=np.uint64)
    m[:, 0] = 1
    for j in range(1, dimension):
        p = int(poly[j])
        s = p.bit_length() - 1
        mj = [int(v) for v in vinit[j, :s]]
        for i in range(s, SOBOL_BITS):
            new = mj[i - s] ^ (mj[i - s] << s)
            for k in range(1, s):
                if (p >> (s - k)) & 1:
                    new ^= mj[i - k] << k
            mj.append(new)
        m[:, j] = mj[:SOBOL_BITS]
    shifts = np.array([POINT_BITS - 1 - b for b in range(SOBOL_BITS)], dtype=np.uint64)
    return m << shifts[:, None]


class SobolSequence:
    """Unrandomized Sobol sequence of a fixed dimension."""

    def __init__(self, dimension: int):
        self.dimension = int(dimension)
        self._v = direction_numbers(self.dimension)
        # prefix[c] = V[0] ^ ... ^ V[c]: the change from point n-1 to n when n has c trailing zeros
        self._prefix = np.bitwise_xor.accumulate(self._v, axis=0)

    def integer_points(self, start: int, count: int) -> np.ndarray:
        """Points ``start .. start+count-1`` as 53-bit integers, shape ``(count, s)``."""
        if start < 0 or count < 0:
            raise ValueError("start and count must be non-negative")
        if start + count > 2**SOBOL_BITS:
            raise ValueError("Sobol index exceeds 2**32")
        out = np.empty((count, self.dimension), dtype=np.uint64)
        if count == 0:
            return out
        x = np.zeros(self.dimension, dtype=np.uint64)
        for b in range(SOBOL_BITS):
            if (start >> b) & 1:
                x ^= self._v[b]
        out[0] = x
        for i in range(1, count):
            n = start + i
            tz = (n & -n).bit_length() - 1
            x = x ^ self._prefix[tz]
            out[i] = x
        return out

    def points(self, start: int, count: int) -> np.ndarray:
        return self.integer_points(start, count).astype(np.float64) * _SCALE

    def point(self, n: int) -> np.ndarray:
        return self.points(n, 1)[0]


class RandomizedSobol:
    """``M`` independent random digital shifts of one Sobol sequence.

    Shift ``m`` is drawn from ``stream.child(m)`` so copies are independent and
    reproducible. ``randomize=False`` gives all-zero shifts (the base sequence).
    """

    def __init__(self, dimension: int, stream: RandomStream | None = None, n_random: int = 32,
                 randomize: bool = True):
        self.dimension = int(dimension)
        self.base = SobolSequence(min(self.dimension, MAX_DIMENSION))
        self.n_pad = self.dimension - self.base.dimension
        self.n_random = int(n_random)
        self.stream = stream
        if self.n_pad and stream is None:
            raise ValueError(f"dimensions above {MAX_DIMENSION} need a RandomStream for padding")
        if randomize:
            if stream is None:
                raise ValueError("a RandomStream is required for randomized sequences")
            self.shifts = np.stack([stream.child(m).bits53(self.base.dimension)
                                    for m in range(self.n_random)])
        else:
            self.shifts = np.zeros((self.n_random, self.base.dimension), dtype=np.uint64)

    def block(self, m: int, start: int, count: int) -> np.ndarray:
        """Points ``start .. start+count-1`` of randomized copy ``m`` in [0, 1)^s."""
        if not 0 <= m < self.n_random:
            raise IndexError(f"randomization index {m} out of range")
        ints = self.base.integer_points(start, count) ^ self.shifts[m]
        pts = ints.astype(np.float64) * _SCALE
        if self.n_pad:
            pad = np.stack([self.stream.child(m, n).uniform(self.n_pad) for n in range(start, start + count)])
            pts = np.concatenate([pts, pad], axis=1)
        return pts

    def next_point(self, m: int, n: int) -> np.ndarray:
        return self.block(m, n, 1)[0]


def star_discrepancy_grid(points: np.ndarray, resolution: int = 64) -> float:
    """Star discrepancy of 2-D points over anchored boxes with corners on a grid.

    Exhaustive over the ``resolution**2`` box corners; a lower bound on the
    true star discrepancy that converges as the resolution grows.
    """
    pts = np.asarray(points)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("star_discrepancy_grid expects points of shape (n, 2)")
    edges = np.arange(1, resolution + 1) / resolution
    # counts[a, b] = #points with x < edges[a] and y < edges[b]
    ix = np.clip(np.floor(pts[:, 0] * resolution).astype(int), 0, resolution - 1)
    iy = np.clip(np.floor(pts[:, 1] * resolution).astype(int), 0, resolution - 1)
    hist = np.zeros((resolution, resolution))
    np.add.at(hist, (ix, iy), 1.0)
    counts = hist.cumsum(axis=0).cumsum(axis=1)
    volume = np.outer(edges, edges)
    return float(np.max(np.abs(counts / len(pts) - volume)))
