"""Keyed random streams and the scalar distribution functions used by the samplers.

Every random quantity in the package is drawn from a :class:`RandomStream`
identified by a 64-bit seed and an integer path, typically
``(method, level, sample_index, field_index)``. The underlying generator is
Philox (counter based), keyed through :class:`numpy.random.SeedSequence`, so a
sample's randomness does not depend on the order in which samples are
evaluated or on which worker evaluates them.
"""

from __future__ import annotations

import numpy as np
from scipy import special

_MASK64 = (1 << 64) - 1

# Path prefixes distinguishing the estimators' randomness.
METHOD_MC = 0
METHOD_QMC = 1
METHOD_MLMC = 2


def parse_seed(value) -> int:
    """Parse a 64-bit seed given as an int or a decimal / ``0x`` hexadecimal string."""
    if isinstance(value, (int, np.integer)):
        seed = int(value)
    else:
        text = str(value).strip().lower().replace("_", "")
        seed = int(text, 16) if text.startswith("0x") else int(text, 10)
    if not 0 <= seed <= _MASK64:
        raise ValueError(f"seed {value!r} is not a 64-bit unsigned integer")
    return seed


class RandomStream:
    """Deterministic random stream addressed by ``(seed, path)``.

    Two streams built from the same seed and path emit identical sequences.
    Streams are cheap to create; create one per (sample, field) rather than
    sharing one across samples.
    """

    __slots__ = ("seed", "path", "_bitgen")

    def __init__(self, seed: int, path=()):
        self.seed = parse_seed(seed)
        self.path = tuple(int(p) for p in path)
        if any(p < 0 for p in self.path):
            raise ValueError("stream path entries must be non-negative")
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._bitgen = np.random.Philox(ss)

    def child(self, *path) -> "RandomStream":
        return RandomStream(self.seed, self.path + tuple(path))

    def __repr__(self):
        return f"RandomStream(seed={self.seed:#x}, path={self.path})"

    def bits53(self, size=None) -> np.ndarray:
        """Uniform 53-bit unsigned integers."""
        n = 1 if size is None else int(np.prod(size))
        raw = self._bitgen.random_raw(n) >> np.uint64(11)
        return raw if size is None else raw.reshape(size)

    def uniform(self, size=None):
        """Uniform draws on the open interval (0, 1)."""
        u = (self.bits53(size).astype(np.float64) + 0.5) * 2.0**-53
        return float(u[0]) if size is None else u

    def standard_normal(self, size=None):
        """Standard normal draws via the inverse CDF of :meth:`uniform`.

        The inverse-CDF route is the one QMC points take as well, so MC and QMC
        inputs pass through identical code.
        """
        return normal_inv_cdf(self.uniform(size))

    def gamma(self, shape: float, scale: float, size=None):
        return gamma_inv_cdf(self.uniform(size), shape, scale)


def sample_standard_normal(stream: RandomStream, size=None):
    return stream.standard_normal(size)


def normal_cdf(x):
    """Standard normal CDF."""
    return special.ndtr(x)


def normal_inv_cdf(p):
    """Inverse of :func:`normal_cdf` on the open interval (0, 1)."""
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any(~((p_arr > 0.0) & (p_arr < 1.0))):
        raise ValueError("normal_inv_cdf requires 0 < p < 1")
    out = special.ndtri(p_arr)
    return float(out) if np.ndim(out) == 0 else out


def gamma_cdf(x, shape: float, scale: float):
    return special.gammainc(shape, np.asarray(x, dtype=np.float64) / scale)


def gamma_inv_cdf(p, shape: float, scale: float):
    """Inverse CDF of the gamma distribution with the given shape and scale.

    Defined for ``0 <= p < 1``; ``p = 0`` maps to the lower support endpoint 0.
    """
    if not (shape > 0 and scale > 0):
        raise ValueError("gamma_inv_cdf requires shape > 0 and scale > 0")
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any(~((p_arr >= 0.0) & (p_arr < 1.0))):
        raise ValueError("gamma_inv_cdf requires 0 <= p < 1")
    out = special.gammaincinv(shape, p_arr) * scale
    return float(out) if np.ndim(out) == 0 else out
