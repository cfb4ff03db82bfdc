import json
import math
import warnings

import numpy as np
import pytest

import sosgmm.clustering as clmod
from sosgmm.clustering import (
    CandidateClusteringSet,
    ClusterParams,
    agreement,
    cluster,
    round_pseudoexpectation,
    split,
    weights_to_uniform,
)
from sosgmm.errors import BudgetExceeded, Infeasible, InvalidShape, WeightsNotCommensurate
from sosgmm.gaussians import GaussianParams, MixtureModel, sample_mixture
from sosgmm.sos import PseudoExpectation, encode_axioms


def indicator(n, idx):
    u = np.zeros(n)
    u[list(idx)] = 1.0
    return u


def assert_partition(clustering, n, k):
    sizes = {len(b) for b in clustering}
    assert sizes == {n // k}
    flat = np.sort(np.concatenate(clustering))
    np.testing.assert_array_equal(flat, np.arange(n))


def far_pair(n, seed, gap=1e3, d=2):
    m = MixtureModel.uniform([GaussianParams(np.zeros(d), np.eye(d)), GaussianParams(np.r_[gap, np.zeros(d - 1)], np.eye(d))])
    return sample_mixture(m, n, seed)


# --- rounding ------------------------------------------------------------------


def test_point_mass_rounds_exactly():
    pe = PseudoExpectation.point_mass([1, 1, 0, 0])
    rng = np.random.default_rng(0)
    for _ in range(20):
        np.testing.assert_array_equal(round_pseudoexpectation(pe, rng), [0, 1])


def test_disjoint_mixture_never_mixes():
    n = 20
    A, B = range(10), range(10, 20)
    pe = PseudoExpectation.mixture([indicator(n, A), indicator(n, B)], [0.5, 0.5])
    rng = np.random.default_rng(1)
    for _ in range(200):
        R = set(round_pseudoexpectation(pe, rng).tolist())
        assert min(len(R & set(A)), len(R & set(B))) == 0


def test_mean_size_on_fixed_pe():
    n, k = 30, 3
    blocks = [range(0, 10), range(10, 20), range(20, 30)]
    pe = PseudoExpectation.mixture([indicator(n, b) for b in blocks], [1 / 3] * 3)
    rng = np.random.default_rng(2)
    sizes = np.array([len(round_pseudoexpectation(pe, rng)) for _ in range(2000)])
    se = sizes.std(ddof=1) / math.sqrt(len(sizes)) + 1e-12
    assert abs(sizes.mean() - n / k) <= 3 * se + 1e-9


def test_split_count_and_determinism():
    s = far_pair(40, 0, gap=30.0)
    ax = encode_axioms(s.points, 2, 2, 1.0, 0.0)
    r1 = split(ax, 0.1, seed=3)
    assert r1.m == math.ceil(4.0 * 2 * math.log(10))
    assert len(r1.subsets) == r1.m
    r2 = split(encode_axioms(s.points, 2, 2, 1.0, 0.0), 0.1, seed=3)
    assert all(np.array_equal(a, b) for a, b in zip(r1.subsets, r2.subsets))
    assert all(np.all((R >= 0) & (R < 40)) for R in r1.subsets)


def test_split_rejects_eta():
    ax = encode_axioms(np.random.default_rng(0).standard_normal((10, 2)), 2, 2, 1.0, 0.0)
    with pytest.raises(Exception):
        split(ax, 1.5)


# --- cluster -----------------------------------------------------------------


def test_base_case_single_clustering():
    X = np.random.default_rng(0).standard_normal((30, 2))
    cs = cluster(X, 1, ClusterParams())
    assert len(cs) == 1
    assert_partition(cs.clusterings[0], 30, 1)


def test_infeasible_split_gives_empty_set(monkeypatch):
    def boom(*a, **kw):
        raise Infeasible("forced")

    monkeypatch.setattr(clmod, "split", boom)
    cs = cluster(np.random.default_rng(0).standard_normal((40, 2)), 2, ClusterParams())
    assert len(cs) == 0
    assert any("Infeasible" in e.get("note", "") for e in cs.events)


def test_indivisible_rejected():
    with pytest.raises(InvalidShape):
        cluster(np.zeros((11, 2)), 2)


@pytest.fixture(scope="module")
def far_result():
    s = far_pair(200, 0)
    return s, cluster(s.points, 2, ClusterParams(eps=0.0), seed=0)


def test_far_pair_recovered(far_result):
    s, cs = far_result
    assert len(cs) >= 1
    assert max(agreement(s.labels, c) for c in cs.clusterings) >= 0.95


def test_partition_structure(far_result):
    s, cs = far_result
    for c in cs.clusterings:
        assert_partition(c, s.n, 2)
    assert len(cs.provenance) == len(cs)


def test_clustering_roundtrip(far_result):
    _, cs = far_result
    back = CandidateClusteringSet.from_dict(json.loads(json.dumps(cs.to_dict())))
    assert len(back) == len(cs)
    for a, b in zip(back.clusterings, cs.clusterings):
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert back.provenance == cs.provenance


def test_determinism_and_budget():
    s = far_pair(40, 5, gap=40.0)
    p = ClusterParams(eps=0.0, t=2)
    a = cluster(s.points, 2, p, seed=1)
    b = cluster(s.points, 2, p, seed=1)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    if len(a) > 1:
        with pytest.warns(BudgetExceeded):
            small = cluster(s.points, 2, ClusterParams(eps=0.0, t=2, max_candidates=1), seed=1)
        assert small.budget_exceeded
        keys = {tuple(map(tuple, c)) for c in a.clusterings}
        assert all(tuple(map(tuple, c)) in keys for c in small.clusterings)


def test_agreement_permutation_invariant():
    labels = np.array([0, 0, 1, 1])
    assert agreement(labels, [np.array([2, 3]), np.array([0, 1])]) == 1.0
    assert agreement(labels, [np.array([0, 2]), np.array([1, 3])]) == 0.5


# --- weights -----------------------------------------------------------------


def _m(weights):
    g = [GaussianParams(np.array([float(i)]), np.eye(1)) for i in range(len(weights))]
    return MixtureModel(tuple(g), np.array(weights))


def test_uniform_weights():
    m, mapping = weights_to_uniform(_m([0.5, 0.5]))
    assert m.k == 2 and mapping == [0, 1]


def test_two_thirds_one_third():
    m, mapping = weights_to_uniform(_m([2 / 3, 1 / 3]))
    assert m.k == 3 and sorted(mapping) == [0, 0, 1]
    np.testing.assert_allclose(m.weights, 1 / 3)


def test_incommensurate_weights():
    with pytest.raises(WeightsNotCommensurate):
        weights_to_uniform(_m([0.7, 0.3]))
