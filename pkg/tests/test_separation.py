import numpy as np
import pytest
from scipy import integrate, stats

from sosgmm.errors import InvalidEpsilon, NoPartitionFound
from sosgmm.gaussians import GaussianParams, MixtureModel
from sosgmm.separation import (
    PartitionCase,
    SeparationCase,
    classify_separation,
    hellinger_sq,
    log_ratio_bound_holds,
    overlap_h,
    partition_mixture,
    tv_bracket,
    tv_monte_carlo,
)

from conftest import random_gaussian, random_spd


def g1(mu, var):
    return GaussianParams([float(mu)], [[float(var)]])


def hellinger_quad(p, q):
    """1 - integral of sqrt(p q), by adaptive quadrature (1-d only)."""
    f = lambda x: np.sqrt(stats.norm.pdf(x, p.mean[0], np.sqrt(p.covariance[0, 0]))
                          * stats.norm.pdf(x, q.mean[0], np.sqrt(q.covariance[0, 0])))
    lo = min(p.mean[0], q.mean[0]) - 40
    hi = max(p.mean[0], q.mean[0]) + 40
    val, _ = integrate.quad(f, lo, hi, points=[p.mean[0], q.mean[0]], epsabs=1e-13, epsrel=1e-12, limit=500)
    return 1.0 - val


def test_hellinger_identical_is_zero(rng):
    g = random_gaussian(rng, 3)
    assert hellinger_sq(g, g) == 0.0


@pytest.mark.parametrize(
    "p,q,expected",
    [
        (g1(0, 1), g1(2, 1), 1 - np.exp(-0.5)),
        (g1(0, 1), g1(0, 4), 1 - 4**0.25 / 2.5**0.5),
    ],
)
def test_hellinger_closed_form_values(p, q, expected):
    assert hellinger_sq(p, q) == pytest.approx(expected, abs=1e-12)
    assert hellinger_sq(p, q) == pytest.approx(hellinger_quad(p, q), abs=1e-9)


def test_hellinger_symmetric_and_bounded(rng):
    for _ in range(30):
        d = int(rng.integers(1, 6))
        p, q = random_gaussian(rng, d, 2.0), random_gaussian(rng, d, 2.0)
        h = hellinger_sq(p, q)
        assert h == hellinger_sq(q, p)
        assert 0.0 <= h <= 1.0


def test_bracket_identity_and_arithmetic(rng):
    g = random_gaussian(rng, 2)
    assert tv_bracket(g, g) == (0.0, 0.0)
    # choose q so that H^2 = 0.5 in 1-d: 1 - exp(-delta^2/8) = 0.5
    delta = np.sqrt(8 * np.log(2))
    lo, hi = tv_bracket(g1(0, 1), g1(delta, 1))
    assert lo == pytest.approx(0.5, abs=1e-12)
    assert hi == pytest.approx(np.sqrt(0.75), abs=1e-12)


def test_tv_mc_identical_near_zero():
    g = g1(0, 1)
    est = tv_monte_carlo(g, g, 10_000, 0)
    assert abs(est.value) <= 3 * est.stderr + 1e-12


def test_tv_mc_far_means():
    exact = 2 * stats.norm.cdf(5) - 1
    est = tv_monte_carlo(g1(0, 1), g1(10, 1), 100_000, 1)
    assert abs(est.value - exact) <= 3 * est.stderr + 1e-6
    assert 0 <= est.value <= 1


def test_tv_mc_one_dimensional_exact():
    # equal variances: TV = 2 Phi(|delta| / 2) - 1
    est = tv_monte_carlo(g1(0, 1), g1(1, 1), 200_000, 2)
    exact = 2 * stats.norm.cdf(0.5) - 1
    assert abs(est.value - exact) <= 3 * est.stderr


def test_bracket_contains_mc_small_suite(rng):
    for i in range(10):
        d = int(rng.integers(1, 6))
        p, q = random_gaussian(rng, d, 0.7), random_gaussian(rng, d, 0.7)
        lo, hi = tv_bracket(p, q)
        est = tv_monte_carlo(p, q, 100_000, i)
        assert lo - 3 * est.stderr <= est.value <= hi + 3 * est.stderr


def test_mean_case_example():
    p = GaussianParams(np.zeros(2), np.eye(2))
    q = GaussianParams(np.array([10.0, 0.0]), np.eye(2))
    v = classify_separation(p, q, 1e-3)
    assert v.case is SeparationCase.MEAN
    assert v.witness_value == pytest.approx(50.0, rel=1e-12)
    assert abs(abs(v.witness_direction @ np.array([1.0, 0.0])) - 1) < 1e-12
    assert v.witness_value >= v.thresholds["mean"]


def test_variance_case_example():
    eps = 1e-3
    s2 = 2 * np.log(1 / eps) ** (1 / 6)
    v = classify_separation(g1(0, 1), g1(0, s2), eps)
    assert v.case is SeparationCase.VARIANCE
    assert v.witness_value == pytest.approx(s2, rel=1e-12)
    assert np.linalg.norm(v.witness_direction) == pytest.approx(1.0, abs=1e-10)


def test_covariance_case():
    d = 8
    ev = np.array([1.35, 1 / 1.35] * 4)
    v = classify_separation(GaussianParams(np.zeros(d), np.eye(d)), GaussianParams(np.zeros(d), np.diag(ev)), 1e-3)
    assert v.case is SeparationCase.COVARIANCE
    assert v.witness_direction is None
    assert v.witness_value >= v.thresholds["covariance"]


def test_identical_not_separated(rng):
    g = random_gaussian(rng, 3)
    v = classify_separation(g, g, 1e-3)
    assert v.case is SeparationCase.NONE
    assert v.statistics["mean_stat"] == 0.0
    np.testing.assert_allclose(v.statistics["pencil_eigenvalues"], 1.0, atol=1e-12)
    assert v.statistics["frobenius_stat"] == pytest.approx(0.0, abs=1e-20)


@pytest.mark.parametrize("eps", [0.0, 1.0, 0.5, 1 / np.e])
def test_invalid_eps(eps):
    with pytest.raises(InvalidEpsilon):
        classify_separation(g1(0, 1), g1(1, 1), eps)


@pytest.mark.parametrize("seed", range(5))
def test_affine_invariance(seed):
    rng = np.random.default_rng(seed)
    d = 3
    p, q = random_gaussian(rng, d, 3.0), random_gaussian(rng, d, 3.0)
    base = classify_separation(p, q, 1e-3)
    A = rng.standard_normal((d, d)) + 2 * np.eye(d)
    b = rng.standard_normal(d)
    moved = classify_separation(p.affine(A, b), q.affine(A, b), 1e-3)
    assert moved.case is base.case
    assert abs(moved.witness_value - base.witness_value) <= 1e-8 * max(1.0, abs(base.witness_value))


def test_partition_hyperplane():
    m = MixtureModel.uniform([GaussianParams(np.zeros(2), np.eye(2)), GaussianParams(np.array([1e3, 0.0]), np.eye(2))])
    part = partition_mixture(m, 1e-3)
    assert part.case is PartitionCase.HYPERPLANE
    assert {part.side_a, part.side_b} == {(0,), (1,)}
    assert abs(abs(part.direction[0]) - 1) < 1e-9


def test_partition_high_low_variance():
    m = MixtureModel.uniform([GaussianParams(np.zeros(2), np.eye(2)), GaussianParams(np.zeros(2), 1e6 * np.eye(2))])
    part = partition_mixture(m, 1e-2)
    assert part.case is PartitionCase.HIGH_LOW_VARIANCE
    assert set(part.side_a) | set(part.side_b) == {0, 1}


def test_partition_identical_fails():
    g = GaussianParams(np.zeros(2), np.eye(2))
    with pytest.warns(UserWarning):
        with pytest.raises(NoPartitionFound):
            partition_mixture(MixtureModel.uniform([g, g]), 1e-3)


def test_overlap_h_identity_and_symmetry():
    g = g1(0, 1)
    assert overlap_h(g, g, 20_000, 0) == pytest.approx(0.0, abs=1e-12)
    p, q = g1(0, 1), g1(1.5, 2)
    assert overlap_h(p, q, 200_000, 3) == pytest.approx(overlap_h(q, p, 200_000, 3), abs=0.02)


def test_overlap_triangle_diagnostic(rng):
    """h(A, C) <= c (1 + h(B, C)) whenever h(A, B) <= 1, for a modest constant c."""
    ratios = []
    for i in range(25):
        A = g1(rng.normal(), rng.uniform(0.5, 2))
        B = g1(A.mean[0] + rng.normal(scale=0.5), A.covariance[0, 0] * rng.uniform(0.7, 1.4))
        C = g1(rng.normal(scale=4), rng.uniform(0.3, 3))
        if overlap_h(A, B, 50_000, i) > 1:
            continue
        ratios.append(overlap_h(A, C, 50_000, i) / (1 + overlap_h(B, C, 50_000, i)))
    assert ratios and max(ratios) <= 10.0


def test_log_ratio_claim_grid():
    for a in np.geomspace(np.e, 1e6, 25):
        x = np.geomspace(1 / a, a, 2001)
        assert np.all(log_ratio_bound_holds(a, x))
