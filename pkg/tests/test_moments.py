import itertools
import math

import numpy as np
import pytest

from sosgmm.errors import DegenerateSubset, InvalidPartition, NoRoot
from sosgmm.gaussians import GaussianParams, MixtureModel, SampleSet, sample_gaussian, sample_mixture
from sosgmm.moments import (
    MomentTensor,
    check_deterministic_conditions,
    counterexample_polynomial,
    double_factorial,
    empirical_whitened_tensor,
    gaussian_moment_tensor,
    identifiability_gap,
    moment_match_counterexample,
    multisets,
    two_component_moments,
)


def wick_full(s, d):
    """Dense Wick tensor by summing over perfect matchings (independent oracle)."""
    out = np.zeros((d,) * s)
    if s % 2:
        return out

    def matchings(items):
        if not items:
            yield []
            return
        a = items[0]
        for i in range(1, len(items)):
            rest = items[1:i] + items[i + 1 :]
            for m in matchings(rest):
                yield [(a, items[i])] + m

    pairings = list(matchings(list(range(s))))
    for idx in itertools.product(range(d), repeat=s):
        out[idx] = sum(all(idx[a] == idx[b] for a, b in m) for m in pairings)
    return out


@pytest.mark.parametrize("s,d", [(0, 2), (1, 3), (2, 3), (3, 2), (4, 2), (4, 3), (6, 2)])
def test_wick_matches_matching_count(s, d):
    np.testing.assert_array_equal(gaussian_moment_tensor(s, d).full(), wick_full(s, d))


def test_order_two_is_identity():
    np.testing.assert_array_equal(gaussian_moment_tensor(2, 5).full(), np.eye(5))


def test_order_three_is_zero():
    assert not np.any(gaussian_moment_tensor(3, 4).values)


def test_order_four_entries():
    M = gaussian_moment_tensor(4, 2)
    assert M.entry(0, 0, 0, 0) == 3
    assert M.entry(0, 0, 1, 1) == 1
    assert M.entry(0, 0, 0, 1) == 0


@pytest.mark.parametrize("d", [1, 2, 3, 4, 5])
def test_contraction_identity(d):
    M4 = gaussian_moment_tensor(4, d).full()
    contracted = np.einsum("ijkk->ij", M4)
    np.testing.assert_array_equal(contracted, (d + 2) * gaussian_moment_tensor(2, d).full())


def test_frobenius_weights_match_dense(rng):
    T = MomentTensor.from_full(wick_full(4, 3) + 0.0)
    assert T.frobenius_norm() == pytest.approx(np.linalg.norm(wick_full(4, 3)), rel=1e-14)


def test_multisets_lexicographic():
    ms = multisets(3, 2)
    assert list(ms) == sorted(ms)
    assert len(ms) == math.comb(3 + 2 - 1, 2)


def test_whitened_low_orders(rng):
    X = sample_gaussian(GaussianParams(np.array([1.0, 2.0, 3.0]), np.diag([1.0, 4.0, 9.0])), 500, 1)
    np.testing.assert_allclose(empirical_whitened_tensor(X, None, 1).values, 0.0, atol=1e-12)
    np.testing.assert_allclose(empirical_whitened_tensor(X, None, 2).full(), np.eye(3), atol=1e-10)


def test_whitened_fourth_moment_concentration():
    X = np.random.default_rng(0).standard_normal((100_000, 2))
    assert empirical_whitened_tensor(X, None, 4).entry(0, 0, 0, 0) == pytest.approx(3.0, abs=0.1)


def test_whitened_affine_invariant(rng):
    X = rng.standard_normal((300, 3))
    A = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    b = rng.standard_normal(3)
    for s in (3, 4):
        T0 = empirical_whitened_tensor(X, None, s)
        T1 = empirical_whitened_tensor(X @ A.T + b, None, s)
        # the symmetric whitening differs by a rotation; compare rotation-invariant norms
        assert abs(T0.frobenius_norm() - T1.frobenius_norm()) <= 1e-8
        assert (T0 - gaussian_moment_tensor(s, 3)).frobenius_norm() == pytest.approx(
            (T1 - gaussian_moment_tensor(s, 3)).frobenius_norm(), abs=1e-8
        )


def test_whitened_degenerate():
    with pytest.raises(DegenerateSubset):
        empirical_whitened_tensor(np.ones((10, 2)), None, 2)
    with pytest.raises(DegenerateSubset):
        empirical_whitened_tensor(np.random.default_rng(0).standard_normal((2, 3)), None, 2)


def _clean(seed, n=2000, d=2):
    m = MixtureModel.uniform([GaussianParams(np.zeros(d), np.eye(d))])
    return sample_mixture(m, n, seed)


def test_clean_data_passes():
    s = _clean(0)
    rep = check_deterministic_conditions(s, [np.arange(s.n)], 0.5, 0.1, 4, 50, 0)
    assert rep.passed
    assert all(v >= 0 for v in rep.moment_residuals.values())
    for fr in rep.event_fractions.values():
        assert all(0 <= x <= 1 for x in fr.values())


def test_planted_outlier_fails_condition_one():
    s = _clean(1)
    X = np.array(s.points)
    X[0] = [1e3, 0.0]
    rep = check_deterministic_conditions(SampleSet(X), [np.arange(len(X))], 0.5, 0.1, 4, 50, 0)
    assert not rep.condition1_passed
    assert rep.moment_residuals[(0, 4)] > rep.thresholds[(0, 4)]


def test_xi_one_trivially_passes_condition_two():
    s = _clean(2, n=400)
    rep = check_deterministic_conditions(s, [np.arange(s.n)], 0.5, 1.0, 2, 10, 0)
    assert rep.condition2_passed


def test_empty_block_rejected():
    s = _clean(0, n=100)
    with pytest.raises(InvalidPartition):
        check_deterministic_conditions(s, [np.arange(100), np.array([], int)], 0.5, 0.1, 2)


def test_overlapping_blocks_rejected():
    s = _clean(0, n=100)
    with pytest.raises(InvalidPartition):
        check_deterministic_conditions(s, [np.arange(50), np.arange(40, 90)], 0.5, 0.1, 2)


def test_monotone_in_delta_and_xi():
    m = MixtureModel.uniform([GaussianParams(np.zeros(2), np.eye(2)), GaussianParams(np.array([8.0, 0]), np.eye(2))])
    s = sample_mixture(m, 600, 3)
    part = [np.flatnonzero(s.labels == c) for c in (0, 1)]
    outcomes = {}
    for delta in (0.05, 0.5, 5.0):
        for xi in (0.01, 0.1, 0.3):
            outcomes[(delta, xi)] = check_deterministic_conditions(s, part, delta, xi, 4, 20, 7).passed
    for (delta, xi), ok in outcomes.items():
        if ok:
            for (d2, x2), ok2 in outcomes.items():
                if d2 >= delta and x2 >= xi:
                    assert ok2


def test_counterexample_alpha():
    alpha, res = moment_match_counterexample(2)
    assert alpha == pytest.approx(0.211, abs=1e-3)
    assert res <= 1e-9


def test_counterexample_finite_delta():
    alpha, _ = moment_match_counterexample(2)
    t, delta = 2, 1e4
    m2 = two_component_moments(alpha, delta, 2)
    m4 = two_component_moments(alpha, delta, 4)
    assert m4 / (double_factorial(2 * t - 1) * m2**t) == pytest.approx(1.0, abs=0.01)


@pytest.mark.parametrize("t", [3, 4])
def test_counterexample_other_orders(t):
    try:
        alpha, res = moment_match_counterexample(t)
    except NoRoot:
        return
    assert 0 < alpha < 0.5 and abs(counterexample_polynomial(alpha, t)) <= 1e-9


def test_third_moment_forces_trivial_alpha():
    """With a centered mixture, E x^3 = a(1-a)(1-2a) D^3; on (0, 1/2) it never vanishes."""
    a = np.linspace(1e-6, 0.5 - 1e-6, 10001)
    lead = a * (1 - a) * (1 - 2 * a)
    assert np.all(lead > 0)
    # and the exact third moment agrees with the leading term
    for al in (0.1, 0.211, 0.4):
        assert two_component_moments(al, 50.0, 3) == pytest.approx(al * (1 - al) * (1 - 2 * al) * 50.0**3, rel=1e-12)


def _pair_fixture():
    m = MixtureModel.uniform([GaussianParams(np.zeros(2), np.eye(2)), GaussianParams(np.array([10.0, 0]), np.eye(2))])
    return m, sample_mixture(m, 400, 11)


def test_gap_pure_subset():
    _, s = _pair_fixture()
    rep = identifiability_gap(s, np.flatnonzero(s.labels == 0), 0, 1, np.array([1.0, 0]))
    assert rep.overlap_product == 0.0


def test_gap_balanced_union():
    m, s = _pair_fixture()
    v = np.array([1.0, 0.0])
    rep = identifiability_gap(s, np.arange(s.n), 0, 1, v, params=m.components)
    assert rep.subset_variance >= 0.2 * 10.0**2
    assert rep.overlap_product == pytest.approx(0.25)


def test_gap_single_point():
    _, s = _pair_fixture()
    assert identifiability_gap(s, [5], 0, 1, np.array([0.0, 1.0])).subset_variance == 0.0
