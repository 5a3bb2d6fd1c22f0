import numpy as np
import pytest
from scipy import stats
from scipy.stats import qmc

from tracer_uq.rng import RandomStream
from tracer_uq.sobol import MAX_DIMENSION, RandomizedSobol, SobolSequence, star_discrepancy_grid


def _van_der_corput(n):
    out = np.zeros(n)
    for i in range(n):
        x, f, k = 0.0, 0.5, i
        while k:
            x += f * (k & 1)
            k >>= 1
            f *= 0.5
        out[i] = x
    return out


def test_first_coordinate_is_van_der_corput():
    pts = SobolSequence(3).points(0, 64)
    assert np.array_equal(pts[:, 0], _van_der_corput(64))


def test_point_sets_match_scipy_reference():
    # scipy enumerates in Gray-code order; the first 2**m points form the same set
    ours = SobolSequence(40).points(0, 256)
    ref = qmc.Sobol(40, scramble=False, bits=32).random(256)
    key = lambda a: a[np.lexsort(a.T[::-1])]
    assert np.array_equal(key(ours), key(ref))


def test_block_start_offset_consistent():
    s = SobolSequence(7)
    assert np.array_equal(s.points(0, 100)[37:60], s.points(37, 23))


def test_zero_shift_reproduces_base_sequence():
    r = RandomizedSobol(5, randomize=False, n_random=3)
    assert np.array_equal(r.block(2, 0, 50), SobolSequence(5).points(0, 50))


def test_dimension_limits():
    with pytest.raises(ValueError):
        SobolSequence(0)
    with pytest.raises(ValueError):
        SobolSequence(MAX_DIMENSION + 1)


def test_shifted_points_are_uniform_and_copies_independent():
    r = RandomizedSobol(4, RandomStream(99, (1,)), n_random=32)
    firsts = np.array([r.next_point(m, 0) for m in range(32)])
    # a single shifted point is U(0,1)^s; the first point across copies tests this
    assert stats.kstest(firsts.ravel(), "uniform").pvalue > 1e-3
    shifts = r.shifts.astype(np.float64) * 2.0**-53
    corr = np.corrcoef(shifts)
    assert np.max(np.abs(corr[np.triu_indices(32, 1)])) < 0.999
    # estimates from different copies of a smooth integrand are uncorrelated
    f = lambda x: np.prod(1 + 0.5 * (x - 0.5), axis=1)
    r2 = RandomizedSobol(4, RandomStream(100, (1,)), n_random=400)
    est = np.array([f(r2.block(m, 0, 16)).mean() for m in range(400)])
    assert abs(np.corrcoef(est[0::2], est[1::2])[0, 1]) < 4 / np.sqrt(200)
    assert abs(est.mean() - 1.0) < 4 * est.std() / np.sqrt(400)


def test_reproducible_shifts():
    a = RandomizedSobol(6, RandomStream(5, (1, 2))).block(3, 10, 5)
    b = RandomizedSobol(6, RandomStream(5, (1, 2))).block(3, 10, 5)
    assert np.array_equal(a, b)


def test_discrepancy_below_pseudorandom():
    n = 1024
    sob = []
    mc = []
    for trial in range(20):
        r = RandomizedSobol(2, RandomStream(2024, (trial,)), n_random=1)
        sob.append(star_discrepancy_grid(r.block(0, 0, n), 128))
        mc.append(star_discrepancy_grid(RandomStream(2025, (trial,)).uniform((n, 2)), 128))
    assert np.median(sob) < 0.25 * np.median(mc)


def test_digital_net_property():
    # every elementary 2-d interval of volume 1/64 holds exactly one of 64 points
    pts = SobolSequence(2).points(0, 64)
    for a in range(7):
        b = 6 - a
        cells = set(zip(np.floor(pts[:, 0] * 2**a).astype(int), np.floor(pts[:, 1] * 2**b).astype(int)))
        assert len(cells) == 64


def test_padding_beyond_table():
    from tracer_uq.rng import RandomStream
    dim = MAX_DIMENSION + 5
    seq = RandomizedSobol(dim, RandomStream(1, (9,)), 2)
    blk = seq.block(1, 3, 4)
    assert blk.shape == (4, dim)
    assert np.all((blk > 0) & (blk < 1))
    # leading coordinates match the unpadded sequence with the same shifts
    lead = RandomizedSobol(MAX_DIMENSION, RandomStream(1, (9,)), 2).block(1, 3, 4)
    assert np.array_equal(blk[:, :MAX_DIMENSION], lead)
    assert np.array_equal(seq.next_point(1, 4), blk[1])
    assert not np.array_equal(seq.block(0, 3, 1)[0, MAX_DIMENSION:], blk[0, MAX_DIMENSION:])
