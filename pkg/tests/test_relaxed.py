import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expi

from conftest import random_instance
from talr.errors import DataError, NumericError
from talr.hamming import TieGroupedRanking, binarize_and_pack, rank_by_distance
from talr.metrics import AffinityLevels, ap_tie_aware, build_tie_histogram, dcg_tie_aware
from talr.relaxed import (
    SoftHistogramSet,
    ap_relaxed,
    ap_simplified,
    build_soft_histograms,
    dcg_relaxed,
    dcg_relaxed_terms,
    dcg_simplified,
    log_integral,
    log_integral_many,
    relax_codes,
    relaxed_distance,
    soft_bin,
    soft_histogram,
)


def hard(groups, levels_per_item, levels=(0, 1)):
    r = TieGroupedRanking.from_groups(groups)
    aff = AffinityLevels(levels_per_item, levels)
    h = build_tie_histogram(r, aff)
    return h, SoftHistogramSet.from_hard(h)


def no_tie_instance(rng, n, levels=(0, 1)):
    dist = rng.permutation(n + 20)[:n]
    lv = rng.choice(levels, n)
    lv[rng.integers(n)] = max(levels)
    return hard(list(rank_by_distance(dist, n + 19).groups), lv, levels)


# ------------------------------------------------------------ codes and distances


def test_tanh_scalar():
    assert relax_codes(np.array([[0.1]]), 40).values[0, 0] == pytest.approx(0.999329, abs=5e-7)
    assert relax_codes(np.zeros((1, 3)), 2).values.tolist() == [[0, 0, 0]]


def test_alpha_must_be_positive():
    with pytest.raises(DataError):
        relax_codes(np.ones((1, 2)), 0.0)


def test_large_alpha_matches_sign(rng):
    f = rng.normal(size=(20, 30))
    signs = np.sign(relax_codes(f, 1e6).values).astype(int)
    assert np.array_equal(signs, binarize_and_pack(f).to_signs())


def test_relaxed_distance_saturated(rng):
    x = np.full(16, 0.99999)
    assert relaxed_distance(x, x) == pytest.approx(0, abs=1e-3)
    assert relaxed_distance(x, -x) == pytest.approx(16, abs=1e-3)
    s = rng.choice([-1, 1], (2, 16))
    q, y = 0.99999 * s[0], 0.99999 * s[1]
    assert abs(relaxed_distance(q, y) - np.sum(s[0] != s[1])) <= 1e-3


# ------------------------------------------------------------ soft binning


def test_soft_bin_values():
    assert soft_bin(3.0, 3) == 1.0
    assert soft_bin(2.5, 3) == 0.5 and soft_bin(3.5, 3) == 0.5
    assert soft_bin(4.0, 3) == 0.0


def test_partition_of_unity():
    z = np.linspace(0, 16, 100_001)
    total = soft_bin(z[:, None], np.arange(17)).sum(axis=1)
    assert np.max(np.abs(total - 1)) <= 1e-12


def test_soft_histogram_single_item():
    s = soft_histogram(np.array([1.5]), np.array([0]), 4, 1)
    assert s[:, 0].tolist() == [0, 0.5, 0.5, 0, 0]


def test_saturated_codes_give_hard_histogram(rng):
    signs = rng.choice([-1, 1], (12, 8))
    lv = rng.integers(0, 3, 12)
    soft = build_soft_histograms(0, relax_codes(signs * 50.0, 1.0), AffinityLevels(lv, (0, 1, 2)))
    dist = (8 - signs[1:] @ signs[0]) // 2
    h = build_tie_histogram(rank_by_distance(dist, 8), AffinityLevels(lv[1:], (0, 1, 2)))
    assert np.allclose(soft.soft, h.counts, atol=1e-12)


def test_soft_counts_sum_to_batch_minus_one(rng):
    codes = relax_codes(rng.normal(size=(16, 8)), 1.0)
    lv = rng.integers(0, 2, 16)
    s = build_soft_histograms(3, codes, AffinityLevels(lv))
    assert s.soft.sum() == pytest.approx(15, abs=1e-12)


def test_banded_histogram_matches_dense(rng):
    for slope in (0.5, 1.0, 2.3):
        z = rng.uniform(0, 10, (5, 40))
        z[0, :5] = [0, 1, 2, 10, 9.5]
        lv = rng.integers(-1, 3, (5, 40))
        dense = np.einsum(
            "qnd,qnl->qdl",
            soft_bin(z[..., None], np.arange(11), slope),
            (lv[..., None] == np.arange(3)).astype(float),
        )
        assert np.allclose(soft_histogram(z, lv, 10, 3, slope), dense, atol=1e-14)


def test_saturation_consistency(rng):
    f = rng.normal(size=(10, 12))
    f[np.abs(f) < 0.05] = 0.05
    lv = rng.integers(0, 2, 10)
    signs = np.where(f > 0, 1, -1)
    dist = (12 - signs[1:] @ signs[0]) // 2
    target = build_tie_histogram(rank_by_distance(dist, 12), AffinityLevels(lv[1:])).counts
    gaps, peaks = [], []
    for alpha in (1, 5, 25, 125, 625):
        codes = relax_codes(f, alpha)
        peaks.append(np.abs(codes.values).max())
        gaps.append(np.abs(build_soft_histograms(0, codes, AffinityLevels(lv)).soft - target).sum())
    assert np.all(np.diff(peaks) >= 0) and peaks[-1] > 1 - 1e-12
    assert gaps[-1] < 1e-9 and gaps[-1] < gaps[0]


# ------------------------------------------------------------ AP relaxations


def test_ap_simplified_examples():
    _, s = hard([[0]], [1])
    assert ap_simplified(s, 1) == 1.0
    _, s = hard([[0, 1]], [1, 0])
    assert ap_simplified(s, 1) == pytest.approx(2 / 3, abs=1e-15)


def test_ap_relaxed_two_item_tie():
    _, s = hard([[0, 1]], [1, 0])
    value = ap_relaxed(s, 1)
    assert value == pytest.approx(0.5 * math.log(5), abs=1e-15)
    assert abs(value - 0.75) <= 0.15


def test_ap_relaxed_exact_without_ties(rng):
    for _ in range(200):
        h, s = no_tie_instance(rng, int(rng.integers(1, 60)))
        assert ap_relaxed(s, h.total_pos) == pytest.approx(ap_tie_aware(h), abs=1e-12)


def test_ap_simplified_close_without_ties(rng):
    for _ in range(200):
        h, s = no_tie_instance(rng, int(rng.integers(50, 120)))
        assert abs(ap_simplified(s, h.total_pos) - ap_tie_aware(h)) <= 0.05


def test_ap_simplified_range(rng):
    for _ in range(300):
        r, aff = random_instance(rng, 20, 6, (0, 1))
        s = SoftHistogramSet.from_hard(build_tie_histogram(r, aff))
        assert 0 < ap_simplified(s, int(aff.relevant.sum())) <= 1 + 1e-12


def test_ap_relaxed_unshifted_log_flag():
    _, s = hard([[0], [1, 2]], [1, 1, 0])
    default, unshifted = ap_relaxed(s, 2), ap_relaxed(s, 2, unshifted=True)
    assert math.isfinite(unshifted) and unshifted != default


def test_harmonic_log_bound(rng):
    worst = -np.inf
    for _ in range(10_000):
        prev = int(rng.integers(1, 10_000))
        n = int(rng.integers(1, 101))
        harmonic = math.fsum(1 / t for t in range(prev + 1, prev + n + 1))
        err = abs(harmonic - math.log((prev + n) / prev))
        worst = max(worst, err - n / (2 * prev**2))
    assert worst <= 0


# ------------------------------------------------------------ DCG relaxations


def test_dcg_simplified_examples():
    for v in (1, 2, 5):
        _, s = hard([[0]], [v], (0, 1, 2, 5))
        assert dcg_simplified(s) == pytest.approx(2.0**v - 1, abs=1e-12)
    _, s = hard([[0, 1]], [1, 0])
    assert dcg_simplified(s) == pytest.approx(1 / math.log2(2.5), abs=1e-15)
    assert dcg_simplified(s) <= 0.5 * (1 + 1 / math.log2(3))


def test_jensen_lower_bound(rng):
    for _ in range(1000):
        r, aff = random_instance(rng, 25, 5, (0, 1, 2, 5))
        h = build_tie_histogram(r, aff)
        assert dcg_simplified(SoftHistogramSet.from_hard(h)) <= dcg_tie_aware(h) + 1e-12


def test_dcg_relaxed_empty_bins_contribute_nothing():
    _, s = hard([[], [0], [], [1]], [1, 0])
    terms = dcg_relaxed_terms(s.soft, (0, 1))
    assert terms[0] == 0 and terms[2] == 0 and terms[3] == 0 and terms[1] > 0


def test_dcg_relaxed_close_without_ties(rng):
    worst = 0.0
    for _ in range(100):
        h, s = no_tie_instance(rng, 100, (0, 1, 2))
        exact = dcg_tie_aware(h)
        worst = max(worst, abs(dcg_relaxed(s) - exact) / exact)
    assert worst <= 0.02


def test_dcg_relaxed_unshifted_needs_nonzero_prefix():
    _, s = hard([[0], [1]], [1, 0])
    with pytest.raises(NumericError):
        dcg_relaxed(s, unshifted=True)


def test_log_integral_against_exponential_integral():
    assert log_integral(2.0, 3.0) == pytest.approx(1.118425, abs=5e-7)
    assert log_integral(2.0, 3.0) == pytest.approx(expi(math.log(3)) - expi(math.log(2)), abs=1e-10)


@settings(max_examples=100)
@given(st.floats(1.05, 500), st.floats(0, 300))
def test_log_integral_property(a, width):
    b = a + width
    ref = expi(math.log(b)) - expi(math.log(a))
    assert log_integral(a, b) == pytest.approx(ref, abs=1e-9)
    assert log_integral_many(np.array([a]), np.array([b]))[0] == pytest.approx(ref, abs=1e-9)


def test_log_integral_errors():
    with pytest.raises(NumericError):
        log_integral(0.5, 2.0)
    with pytest.raises(NumericError):
        log_integral(1.0 + 1e-9, 50.0, tol=1e-16, max_depth=3)
    with pytest.raises(NumericError):
        log_integral_many(np.array([1.0 + 1e-9]), np.array([50.0]), tol=1e-16, max_depth=3)
