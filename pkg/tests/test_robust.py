import json
import warnings

import numpy as np
import pytest

from conftest import random_gaussian
from sosgmm.clustering import ClusterParams
from sosgmm.errors import AllCandidatesRejected, BudgetExhausted, InvalidParameter, InvalidSampleCount, PipelineFailed
from sosgmm.filtering import robust_gaussian, robust_gaussian_with_report, trimmed_covariance
from sosgmm.gaussians import GaussianParams, MixtureModel, SampleSet, corrupt, sample_gaussian, sample_mixture
from sosgmm.robust import (
    HypothesisMixture,
    PipelineParams,
    full_pipeline,
    match_components,
    recluster,
    tournament,
    tournament_with_report,
)

STD2 = GaussianParams(np.zeros(2), np.eye(2))


def clean_set(n, seed, d=2):
    return sample_mixture(MixtureModel.uniform([GaussianParams(np.zeros(d), np.eye(d))]), n, seed)


# --- robust_gaussian -------------------------------------------------------------


@pytest.mark.parametrize("seed", range(20))
def test_eps_zero_is_empirical(seed):
    X = sample_gaussian(STD2, 5000, seed)
    g, rep = robust_gaussian_with_report(X, 0.0)
    np.testing.assert_array_equal(g.mean, X.mean(axis=0))
    diff = X - X.mean(axis=0)
    np.testing.assert_allclose(g.covariance, diff.T @ diff / len(X), rtol=0, atol=1e-14)
    assert rep.iterations == 0 and len(rep.removed) == 0
    assert np.linalg.norm(g.mean) < 0.1
    assert np.linalg.norm(g.covariance - np.eye(2), 2) < 0.1


@pytest.mark.parametrize("seed", range(5))
def test_clean_fixture_does_not_trigger_filter(seed):
    X = sample_gaussian(STD2, 5000, seed)
    _, rep = robust_gaussian_with_report(X, 0.05)
    assert rep.passed
    assert len(rep.removed) == 0


@pytest.mark.parametrize("seed", range(3))
def test_far_cluster_filtered(seed):
    s = clean_set(5000, seed)
    bad = corrupt(s, 0.05, "far-cluster", seed=seed, distance=1e3)
    clean_err = np.linalg.norm(s.points.mean(axis=0))
    naive_err = np.linalg.norm(bad.points.mean(axis=0))
    g = robust_gaussian(bad.points, 0.05, seed=seed)
    err = np.linalg.norm(g.mean)
    assert err < 10 * max(clean_err, 1e-2)
    assert err < naive_err / 100


def test_removals_respect_budget():
    s = corrupt(clean_set(1000, 0), 0.2, "far-cluster", seed=0, distance=50.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BudgetExhausted)
        _, rep = robust_gaussian_with_report(s.points, 0.1)
    assert len(rep.removed) <= rep.budget == 200
    assert len(set(rep.removed.tolist())) == len(rep.removed)


def test_identical_points_use_ridge():
    X = np.tile([3.0, -1.0], (100, 1))
    g, rep = robust_gaussian_with_report(X, 0.05)
    np.testing.assert_array_equal(g.mean, [3.0, -1.0])
    assert rep.ridge > 0
    assert np.all(np.linalg.eigvalsh(g.covariance) > 0)


@pytest.mark.parametrize("n,eps,err", [(15, 0.05, InvalidSampleCount), (100, 0.3, InvalidParameter), (100, -0.1, InvalidParameter)])
def test_filter_preconditions(n, eps, err):
    with pytest.raises(err):
        robust_gaussian(np.zeros((n, 2)), eps)


def test_trimmed_covariance_ignores_far_rows():
    X = sample_gaussian(STD2, 2000, 1)
    X[:20] += 1e4
    mu, cov = trimmed_covariance(X)
    assert np.linalg.norm(mu) < 0.2
    assert np.linalg.norm(cov - np.eye(2), 2) < 0.3


# --- recluster ---------------------------------------------------------------------


def test_single_hypothesis_labels_zero():
    X = np.random.default_rng(0).standard_normal((50, 3))
    assert np.all(recluster(X, [GaussianParams(np.zeros(3), np.eye(3))]) == 0)


def test_midpoint_tie_goes_to_zero():
    a = GaussianParams(np.array([-1.0, 0.0]), np.eye(2))
    b = GaussianParams(np.array([1.0, 0.0]), np.eye(2))
    assert recluster(np.zeros((1, 2)), [a, b])[0] == 0
    assert recluster(np.zeros((1, 2)), [b, a])[0] == 0


def test_well_separated_labels():
    a = GaussianParams(np.zeros(2), np.eye(2))
    b = GaussianParams(np.array([10.0, 0.0]), np.eye(2))
    X = sample_gaussian(a, 2000, 3)
    assert np.mean(recluster(X, [a, b]) == 0) >= 0.99


@pytest.mark.parametrize("seed", range(5))
def test_recluster_affine_invariant(seed):
    rng = np.random.default_rng(seed)
    hyps = [random_gaussian(rng, 3, 3.0) for _ in range(3)]
    X = rng.standard_normal((300, 3)) * 3
    A = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    b = rng.standard_normal(3)
    before = recluster(X, hyps)
    after = recluster(X @ A.T + b, [h.affine(A, b) for h in hyps])
    np.testing.assert_array_equal(before, after)


# --- tournament --------------------------------------------------------------------


def _single(g):
    return HypothesisMixture((g,), np.ones(1))


def test_single_candidate_unchanged():
    h = _single(STD2)
    assert tournament([h], np.zeros((5, 2))) is h


def test_identical_candidates_pick_first():
    h0 = HypothesisMixture((STD2,), np.ones(1), {"candidate": 0})
    h1 = HypothesisMixture((STD2,), np.ones(1), {"candidate": 1})
    X = sample_gaussian(STD2, 1000, 0)
    assert tournament([h0, h1], X).source["candidate"] == 0


@pytest.mark.parametrize("order", [0, 1])
def test_truth_beats_shifted(order):
    truth = _single(STD2)
    shifted = _single(GaussianParams(np.array([10.0, 0.0]), np.eye(2)))
    cands = [truth, shifted] if order == 0 else [shifted, truth]
    X = sample_gaussian(STD2, 5000, 1)
    assert tournament(cands, X, seed=2) is truth


def test_winner_never_loses_by_more_than_noise():
    rng = np.random.default_rng(4)
    truth = GaussianParams(np.zeros(2), np.eye(2))
    cands = [_single(GaussianParams(rng.normal(0, s, 2), np.eye(2))) for s in (0.05, 0.5, 1.0, 2.0)]
    X = sample_gaussian(truth, 4000, 5)
    win, rep = tournament_with_report(cands, X, seed=1, mc_samples=20000)
    w = rep.winner
    noise = 3 * np.sqrt(0.25 / 4000) + 3 * np.sqrt(0.25 / 20000)
    for m in rep.matches:
        if w in m["pair"] and m["winner"] != w:
            i, j = m["pair"]
            pw = m["predicted"][0 if w == i else 1]
            po = m["predicted"][1 if w == i else 0]
            assert abs(pw - m["empirical"]) - abs(po - m["empirical"]) <= noise


def test_overlapping_candidates_rejected():
    h = HypothesisMixture((STD2, GaussianParams(np.array([0.1, 0.0]), np.eye(2))), np.array([0.5, 0.5]))
    with pytest.raises(AllCandidatesRejected):
        tournament([h, h], np.zeros((10, 2)), eps=0.05)


def test_empty_candidates_rejected():
    with pytest.raises(AllCandidatesRejected):
        tournament([], np.zeros((3, 2)))


# --- HypothesisMixture ---------------------------------------------------------


def test_hypothesis_roundtrip():
    rng = np.random.default_rng(0)
    h = HypothesisMixture(tuple(random_gaussian(rng, 3, 2.0) for _ in range(2)), np.array([0.3, 0.7]), {"candidate": 4})
    assert HypothesisMixture.from_dict(json.loads(json.dumps(h.to_dict()))) == h


@pytest.mark.parametrize("w", [[0.5, 0.6], [-0.1, 1.1], [1.0]])
def test_hypothesis_weight_checks(w):
    with pytest.raises(InvalidParameter):
        HypothesisMixture((STD2, STD2), np.array(w))


# --- full pipeline ---------------------------------------------------------------


def test_k1_matches_robust_gaussian():
    s = corrupt(clean_set(500, 0), 0.05, seed=0)
    p = PipelineParams(cluster=ClusterParams(eps=0.05))
    h, _ = full_pipeline(s, clean_set(100, 1), 1, p, seed=3)
    g = robust_gaussian(s.points, 0.05, seed=3)
    assert h.components[0] == g


def _pair(weights, n, seed, gap=30.0):
    comps = (GaussianParams(np.zeros(2), np.eye(2)), GaussianParams(np.array([gap, 0.0]), np.eye(2)))
    m = MixtureModel(comps, np.array(weights))
    return m, sample_mixture(m, n, seed)


@pytest.fixture(scope="module")
def pipeline_run():
    m, s = _pair([0.5, 0.5], 60, 0)
    fresh = sample_mixture(m, 2000, 99)
    p = PipelineParams(cluster=ClusterParams(eps=0.0, t=2), mc_samples=5000)
    return m, s, fresh, p, full_pipeline(s, fresh, 2, p, seed=1)


def test_pipeline_recovers_pair(pipeline_run):
    m, _, _, _, (h, rep) = pipeline_run
    mc = match_components(h, m)
    assert max(mc["tv"]) <= 0.15
    assert mc["weight_tv"] <= 0.05
    assert rep["candidates"] >= 1


def test_pipeline_deterministic(pipeline_run):
    _, s, fresh, p, (h, _) = pipeline_run
    h2, _ = full_pipeline(s, fresh, 2, p, seed=1)
    assert h2 == h


def test_unequal_weights_recovered():
    # (2/3, 1/3) becomes three equal clusters, two of which share a component
    m, s = _pair([2 / 3, 1 / 3], 60, 2)
    fresh = sample_mixture(m, 3000, 7)
    p = PipelineParams(cluster=ClusterParams(eps=0.0, t=2), mc_samples=5000)
    h, _ = full_pipeline(s, fresh, 3, p, seed=0)
    fit_w = np.zeros(2)
    for i, g in enumerate(h.components):
        fit_w[int(g.mean[0] > 15)] += h.weights[i]
    assert 0.5 * np.abs(fit_w - np.array([2 / 3, 1 / 3])).sum() <= 0.1


def test_empty_candidate_set_fails(monkeypatch):
    import sosgmm.robust as rb
    from sosgmm.clustering import CandidateClusteringSet

    monkeypatch.setattr(rb, "cluster", lambda *a, **kw: CandidateClusteringSet([], [], [], False))
    s = clean_set(40, 0)
    with pytest.raises(PipelineFailed):
        full_pipeline(s, s, 2, PipelineParams(), seed=0)


def test_match_components_identity():
    m, _ = _pair([0.5, 0.5], 10, 0)
    swapped = MixtureModel(m.components[::-1], m.weights)
    mc = match_components(swapped, m)
    assert mc["permutation"] == [1, 0]
    assert max(mc["tv"]) < 1e-12
    assert mc["weight_tv"] == 0.0


def test_corrupted_fresh_outliers_filtered_per_component():
    # the outliers in the fresh half all relabel into one component, where
    # they make up about eps * k of its rows
    from sosgmm.clustering import CandidateClusteringSet

    m, s = _pair([0.5, 0.5], 200, 0, gap=20.0)
    s = corrupt(s, 0.05, "far-cluster", seed=0)
    fresh = corrupt(sample_mixture(m, 4000, 5), 0.05, "far-cluster", seed=5)
    blocks = [np.flatnonzero(s.labels == j) for j in range(2)]
    cs = CandidateClusteringSet([blocks], [{"truth": True}], [], False)
    p = PipelineParams(cluster=ClusterParams(eps=0.05), mc_samples=5000)
    h, _ = full_pipeline(s, fresh, 2, p, seed=0, candidates=cs)
    assert max(match_components(h, m)["tv"]) <= 0.15
