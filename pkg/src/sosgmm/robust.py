"""From candidate clusterings to one hypothesis mixture.

For every candidate clustering each block gets a robust Gaussian fit; the
fits relabel one half of a fresh sample by maximum likelihood, and each
bin is fitted again to give the candidate's hypothesis mixture (weights
are bin fractions).  A Scheffé tournament on the other half of the fresh
sample picks the winner.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .clustering import CandidateClusteringSet, ClusterParams, cluster
from .errors import AllCandidatesRejected, BudgetExhausted, InvalidParameter, PipelineFailed
from .filtering import robust_gaussian, robust_gaussian_with_report
from .gaussians import GaussianParams, MixtureModel, SampleSet, log_density_batch, sample_gaussian
from .separation import tv_bracket

__all__ = [
    "HypothesisMixture",
    "PipelineParams",
    "recluster",
    "tournament",
    "tournament_with_report",
    "full_pipeline",
    "match_components",
    "robust_gaussian",
    "robust_gaussian_with_report",
]


@dataclass(frozen=True, eq=False)
class HypothesisMixture:
    """Hypothesis Gaussians with weights and a provenance record."""

    components: tuple
    weights: np.ndarray
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        comps = tuple(self.components)
        w = np.asarray(self.weights, dtype=float).copy()
        if len(comps) == 0 or w.shape != (len(comps),):
            raise InvalidParameter("need one weight per component and at least one component")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise InvalidParameter("weights must be nonnegative and sum to 1")
        w.setflags(write=False)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", w)

    @property
    def k(self) -> int:
        return len(self.components)

    def log_density(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        parts = np.stack([log_density_batch(g, X) for g in self.components], axis=0)
        return logsumexp(parts + logw[:, None], axis=0)

    def sample(self, n: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        counts = rng.multinomial(n, self.weights)
        seeds = rng.integers(0, 2**63 - 1, size=self.k)
        parts = [sample_gaussian(g, int(c), int(s)) for g, c, s in zip(self.components, counts, seeds) if c]
        return np.concatenate(parts, axis=0)

    def to_mixture(self) -> MixtureModel:
        w = np.asarray(self.weights, float)
        return MixtureModel(self.components, w / w.sum())

    def __eq__(self, other):
        if not isinstance(other, HypothesisMixture):
            return NotImplemented
        return (
            self.k == other.k
            and np.array_equal(self.weights, other.weights)
            and all(a == b for a, b in zip(self.components, other.components))
            and self.source == other.source
        )

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "weights": self.weights.tolist(),
            "components": [g.to_dict() for g in self.components],
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HypothesisMixture":
        return cls(
            tuple(GaussianParams.from_dict(c) for c in data["components"]),
            np.asarray(data["weights"], float),
            dict(data.get("source", {})),
        )


def recluster(samples: np.ndarray, hypotheses: Sequence[GaussianParams]) -> np.ndarray:
    """Label every row by the hypothesis with the largest density (ties: lowest index)."""
    if len(hypotheses) == 0:
        raise InvalidParameter("need at least one hypothesis")
    X = np.atleast_2d(np.asarray(samples, float))
    L = np.stack([log_density_batch(g, X) for g in hypotheses], axis=1)
    return np.argmax(L, axis=1)


def _max_overlap(h: HypothesisMixture) -> float:
    worst = 0.0
    for i in range(h.k):
        for j in range(i + 1, h.k):
            lo, _ = tv_bracket(h.components[i], h.components[j])
            worst = max(worst, 1.0 - lo)
    return worst


@dataclass
class TournamentReport:
    """Outcome of a tournament: kept candidates, win counts and pairwise results."""

    kept: list
    discarded: list
    wins: list
    matches: list
    winner: int

    def to_dict(self) -> dict:
        return {
            "kept": self.kept,
            "discarded": self.discarded,
            "wins": self.wins,
            "matches": self.matches,
            "winner": self.winner,
        }


def tournament_with_report(
    candidates: Sequence[HypothesisMixture],
    fresh: np.ndarray,
    seed: int = 0,
    *,
    eps: float = 0.0,
    k: Optional[int] = None,
    overlap_power: float = 2.0,
    mc_samples: int = 20000,
) -> tuple[HypothesisMixture, TournamentReport]:
    """:func:`tournament` together with a :class:`TournamentReport`."""
    cands = list(candidates)
    if not cands:
        raise AllCandidatesRejected("no candidates given")
    if len(cands) == 1:
        return cands[0], TournamentReport([0], [], [0], [], 0)
    X = np.atleast_2d(np.asarray(fresh, float))
    kept, discarded = [], []
    for i, h in enumerate(cands):
        kk = k or h.k
        if eps > 0 and h.k > 1 and _max_overlap(h) > (eps / kk) ** overlap_power:
            discarded.append(i)
        else:
            kept.append(i)
    if not kept:
        raise AllCandidatesRejected(
            f"all {len(cands)} candidates have components overlapping more than (eps/k)^{overlap_power}"
        )
    rng = np.random.default_rng(seed)
    draws = {i: cands[i].sample(mc_samples, int(rng.integers(2**63 - 1))) for i in kept}
    fresh_ld = {i: cands[i].log_density(X) for i in kept}
    wins = {i: 0 for i in kept}
    matches = []
    for a_pos, i in enumerate(kept):
        for j in kept[a_pos + 1 :]:
            hi, hj = cands[i], cands[j]
            emp = float(np.mean(fresh_ld[i] > fresh_ld[j]))
            pi = float(np.mean(hi.log_density(draws[i]) > hj.log_density(draws[i])))
            pj = float(np.mean(hi.log_density(draws[j]) > hj.log_density(draws[j])))
            di, dj = abs(pi - emp), abs(pj - emp)
            winner = i if di <= dj else j
            wins[winner] += 1
            matches.append({"pair": [i, j], "empirical": emp, "predicted": [pi, pj], "winner": winner})
    best = max(kept, key=lambda i: (wins[i], -i))
    report = TournamentReport(kept, discarded, [wins[i] for i in kept], matches, best)
    return cands[best], report


def tournament(
    candidates: Sequence[HypothesisMixture],
    fresh: np.ndarray,
    seed: int = 0,
    *,
    eps: float = 0.0,
    k: Optional[int] = None,
    overlap_power: float = 2.0,
    mc_samples: int = 20000,
) -> HypothesisMixture:
    """Pick one hypothesis mixture by a Scheffé tournament.

    Parameters
    ----------
    candidates : sequence of HypothesisMixture
    fresh : ndarray
        Samples not used to build the candidates.
    seed : int
        Seeds the Monte Carlo estimates of predicted masses.
    eps : float
        With ``eps > 0``, candidates whose components have pairwise overlap
        ``1 - TV`` (upper bound from the Hellinger bracket) above
        ``(eps / k)^overlap_power`` are discarded first.
    k : int, optional
        Defaults to each candidate's component count.
    overlap_power : float
    mc_samples : int
        Draws per candidate for the predicted masses.

    Returns
    -------
    HypothesisMixture
        The candidate with the most pairwise wins (ties: lowest index).  A
        single candidate is returned as is.  In a match, ``i`` beats ``j``
        when its predicted mass of ``{p_i > p_j}`` is at least as close to the
        empirical mass as ``j``'s (so exact ties go to the lower index).

    Raises
    ------
    AllCandidatesRejected
    """
    return tournament_with_report(
        candidates, fresh, seed, eps=eps, k=k, overlap_power=overlap_power, mc_samples=mc_samples
    )[0]


@dataclass(frozen=True)
class PipelineParams:
    """Settings of :func:`full_pipeline`."""

    cluster: ClusterParams = ClusterParams()
    c_f: float = 10.0
    mc_samples: int = 20000
    overlap_power: float = 2.0

    def to_dict(self) -> dict:
        return {
            "cluster": self.cluster.to_dict(),
            "c_f": self.c_f,
            "mc_samples": self.mc_samples,
            "overlap_power": self.overlap_power,
        }


def _fit(points: np.ndarray, eps: float, c_f: float, seed: int) -> GaussianParams:
    n, d = points.shape
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BudgetExhausted)
        if n >= 10 * d:
            return robust_gaussian(points, min(eps, 0.2), c_f=c_f, seed=seed)
        return robust_gaussian(np.repeat(points, int(np.ceil(10 * d / max(n, 1))), axis=0), 0.0)


def _local_eps(eps: float, total: int, part: int) -> float:
    # all of the corrupted rows may land in one part, so its own corruption
    # fraction can be as large as eps * total / part
    return eps * total / max(part, 1)


def _hypothesis_from_clustering(blocks, X, fresh_fit, eps, c_f, seed, source) -> HypothesisMixture:
    prelim = [_fit(X[b], _local_eps(eps, len(X), len(b)), c_f, seed) for b in blocks]
    labels = recluster(fresh_fit, prelim)
    d = X.shape[1]
    comps, weights, refit = [], [], []
    for i, g in enumerate(prelim):
        rows = fresh_fit[labels == i]
        weights.append(len(rows) / len(fresh_fit))
        if len(rows) >= 10 * d:
            comps.append(_fit(rows, _local_eps(eps, len(fresh_fit), len(rows)), c_f, seed))
            refit.append(True)
        else:
            comps.append(g)
            refit.append(False)
    w = np.asarray(weights, float)
    if w.sum() <= 0:
        w = np.full(len(comps), 1.0 / len(comps))
    src = dict(source)
    src["refit_from_fresh"] = refit
    return HypothesisMixture(tuple(comps), w / w.sum(), src)


def full_pipeline(
    corrupted: SampleSet,
    fresh: SampleSet,
    k: int,
    params: PipelineParams = PipelineParams(),
    seed: int = 0,
    candidates: Optional[CandidateClusteringSet] = None,
) -> tuple[HypothesisMixture, dict]:
    """Cluster, fit, relabel, refit and run the tournament.

    The fresh sample is split in halves: the first half is relabelled and
    refitted for every candidate, the second half runs the tournament.
    With ``k = 1`` the result is :func:`robust_gaussian` on all corrupted
    points.  Pass ``candidates`` to reuse the output of an earlier
    :func:`cluster` call on the same points instead of clustering again.

    Returns
    -------
    (HypothesisMixture, dict)
        The winner and a diagnostics report (candidate count, tournament
        record, stage timings).

    Raises
    ------
    PipelineFailed
        No candidate clustering was produced.
    """
    eps = params.cluster.eps
    X = corrupted.points
    timings = {}
    if k == 1:
        t0 = time.perf_counter()
        g = _fit(X, eps, params.c_f, seed)
        timings["robust"] = time.perf_counter() - t0
        h = HypothesisMixture((g,), np.ones(1), {"candidate": 0, "k": 1})
        return h, {"candidates": 1, "timings": timings}
    t0 = time.perf_counter()
    cs: CandidateClusteringSet = cluster(X, k, params.cluster, seed) if candidates is None else candidates
    timings["cluster"] = time.perf_counter() - t0
    if len(cs) == 0:
        raise PipelineFailed("clustering produced no candidates")
    F = fresh.points
    half = len(F) // 2
    fresh_fit, fresh_tour = F[:half], F[half:]
    t0 = time.perf_counter()
    hyps = [
        _hypothesis_from_clustering(
            blocks, X, fresh_fit, eps, params.c_f, seed, {"candidate": i, "provenance": cs.provenance[i]}
        )
        for i, blocks in enumerate(cs.clusterings)
    ]
    timings["estimate"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    winner, rep = tournament_with_report(
        hyps, fresh_tour, seed, eps=eps, k=k, overlap_power=params.overlap_power,
        mc_samples=params.mc_samples,
    )
    timings["tournament"] = time.perf_counter() - t0
    report = {
        "candidates": len(cs),
        "cluster_events": cs.events,
        "tournament": rep.to_dict(),
        "timings": timings,
        "clusterings": [[b.tolist() for b in c] for c in cs.clusterings],
    }
    return winner, report


def match_components(estimate, truth: MixtureModel) -> dict:
    """Match estimated to true components by minimum total TV-bracket midpoint.

    Returns a dict with ``permutation`` (true index for each estimated
    component), per-component ``tv`` midpoints and brackets, and the
    total-variation distance between the weight vectors after matching.
    """
    est = list(estimate.components)
    tru = list(truth.components)
    C = np.zeros((len(est), len(tru)))
    brackets = {}
    for i, g in enumerate(est):
        for j, h in enumerate(tru):
            lo, hi = tv_bracket(g, h)
            C[i, j] = 0.5 * (lo + hi)
            brackets[(i, j)] = (lo, hi)
    r, c = linear_sum_assignment(C)
    perm = [-1] * len(est)
    for i, j in zip(r, c):
        perm[int(i)] = int(j)
    w_est = np.asarray(estimate.weights, float)
    w_true = np.asarray(truth.weights, float)
    matched = np.zeros(len(tru))
    for i, j in enumerate(perm):
        if j >= 0:
            matched[j] += w_est[i]
    return {
        "permutation": perm,
        "tv": [float(C[i, perm[i]]) if perm[i] >= 0 else None for i in range(len(est))],
        "tv_bracket": [list(brackets[(i, perm[i])]) if perm[i] >= 0 else None for i in range(len(est))],
        "weight_tv": float(0.5 * np.abs(matched - w_true).sum()),
    }
