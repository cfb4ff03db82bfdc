"""Randomized rounding of pseudoexpectations (SPLIT) and the recursive CLUSTER procedure.

CLUSTER keeps the block size ``b = N / k`` of the top-level problem fixed.
A node holding ``n'`` rows is a leaf once ``n' <= 1.1 b``; otherwise it
rounds a pseudoexpectation into subsets, turns unions of those subsets
into candidate sides of exactly a multiple of ``b`` rows, and recurses on
each side and its complement.  Every returned clustering is therefore a
partition into blocks of exactly ``b`` rows.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    BudgetExceeded,
    DegenerateSelection,
    Infeasible,
    InvalidParameter,
    InvalidShape,
    WeightsNotCommensurate,
)
from .filtering import robust_gaussian
from .gaussians import MixtureModel
from .sos import (
    AxiomSystem,
    PseudoExpectation,
    Tolerances,
    encode_axioms,
    fit_whitening,
    solve_feasible,
)

__all__ = [
    "RoundedSubsets",
    "CandidateClusteringSet",
    "ClusterParams",
    "round_pseudoexpectation",
    "split",
    "cluster",
    "weights_to_uniform",
    "agreement",
]


@dataclass(frozen=True)
class RoundedSubsets:
    """Output of :func:`split`.

    Attributes
    ----------
    subsets : list of ndarray
        Sorted row indices of ``R_1, ..., R_m``.
    m : int
    eta : float
    seed : int
    c_m : float
        Iteration constant, ``m = ceil(c_m * k * log(1 / eta))``.
    pseudoexpectations : list of PseudoExpectation
        The solution used for every round (kept for diagnostics).
    """

    subsets: list
    m: int
    eta: float
    seed: int
    c_m: float = 4.0
    pseudoexpectations: list = field(default_factory=list, repr=False)


def round_pseudoexpectation(pe: PseudoExpectation, rng: np.random.Generator) -> np.ndarray:
    """One rounding step: sample ``i`` by ``pE w_i``, then keep ``j`` w.p. ``pE w_i w_j / pE w_i``.

    Returns the sorted selected indices.
    """
    y = np.clip(pe.first_moments, 0.0, None)
    total = y.sum()
    if total <= 0:
        raise DegenerateSelection("pseudoexpectation puts no mass on any row")
    while True:
        i = int(rng.choice(pe.n, p=y / total))
        if y[i] > 0:  # always true under this sampling rule; kept as a guard
            break
    Y = pe.second_moments
    prob = np.clip(Y[i] / y[i], 0.0, 1.0)
    keep = rng.random(pe.n) < prob
    return np.flatnonzero(keep)


def split(
    ax: AxiomSystem,
    eta: float = 0.1,
    seed: int = 0,
    *,
    c_m: float = 4.0,
    tol: Tolerances = Tolerances(),
) -> RoundedSubsets:
    """Round the relaxation ``ax`` into ``m = ceil(c_m k log(1/eta))`` subsets.

    Round ``t`` maximizes the pseudo-expected number of rows not yet
    covered by ``R_1, ..., R_{t-1}`` and rounds the maximizer with
    :func:`round_pseudoexpectation`.

    Raises
    ------
    Infeasible
        Propagated from the first solve.
    """
    if not 0 < eta < 1:
        raise InvalidParameter("eta must lie in (0, 1)")
    m = math.ceil(c_m * ax.k * math.log(1.0 / eta))
    rng = np.random.default_rng(seed)
    covered = np.zeros(ax.n, dtype=bool)
    subsets, pes = [], []
    for _ in range(m):
        c = (~covered).astype(float)
        if not c.any():
            c = np.ones(ax.n)
        pe = solve_feasible(ax, {(i,): 1.0 for i in np.flatnonzero(c)}, "max", tol)
        R = round_pseudoexpectation(pe, rng)
        covered[R] = True
        subsets.append(R)
        pes.append(pe)
    return RoundedSubsets(subsets, m, eta, seed, c_m, pes)


# ---------------------------------------------------------------------------
# CLUSTER


@dataclass(frozen=True)
class ClusterParams:
    """Parameters of :func:`cluster`.

    ``N`` defaults to the number of input rows.  ``max_candidates`` only
    truncates the final ordered list, so raising it never removes a
    clustering.  ``max_groups`` bounds the number of merged rounded subsets
    whose unions are enumerated (``2^max_groups`` unions at most).
    """

    t: int = 4
    delta: float = 0.5
    eps: float = 0.05
    eta: float = 0.1
    N: Optional[int] = None
    c_m: float = 4.0
    c_corr: float = 10.0
    cap_quantile: float = 0.95
    degree: int = 2
    max_candidates: int = 1000
    max_groups: int = 12
    max_sides: int = 64
    jaccard: float = 0.5
    tol: Tolerances = Tolerances.relaxed()

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "tol"}
        out["tol"] = dict(self.tol.__dict__)
        return out


@dataclass
class CandidateClusteringSet:
    """Candidate clusterings with a provenance trace for each.

    Attributes
    ----------
    clusterings : list of list of ndarray
        Each clustering is a list of sorted index arrays of equal size.
    provenance : list of list of dict
        One trace per clustering, listing the recursion nodes and which
        candidate side was taken at each.
    events : list of dict
        Node-level notes (infeasible nodes, dropped empty sides, budget).
    budget_exceeded : bool
    """

    clusterings: list
    provenance: list
    events: list = field(default_factory=list)
    budget_exceeded: bool = False

    def __len__(self) -> int:
        return len(self.clusterings)

    def labels(self, i: int, n: int) -> np.ndarray:
        """Label vector of clustering ``i``."""
        out = np.full(n, -1, dtype=int)
        for b, block in enumerate(self.clusterings[i]):
            out[block] = b
        return out

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "clusterings": [[blk.tolist() for blk in c] for c in self.clusterings],
            "provenance": self.provenance,
            "events": self.events,
            "budget_exceeded": self.budget_exceeded,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CandidateClusteringSet":
        return cls(
            [[np.asarray(b, dtype=int) for b in c] for c in data["clusterings"]],
            data["provenance"],
            data.get("events", []),
            bool(data.get("budget_exceeded", False)),
        )


def _group_subsets(subsets: Sequence[np.ndarray], n: int, threshold: float) -> list:
    """Greedily merge rounded subsets whose Jaccard similarity reaches ``threshold``."""
    groups: list = []
    for R in subsets:
        if len(R) == 0:
            continue
        mask = np.zeros(n, dtype=bool)
        mask[R] = True
        for g in groups:
            inter = np.count_nonzero(g & mask)
            union = np.count_nonzero(g | mask)
            if union and inter / union >= threshold:
                g |= mask
                break
        else:
            groups.append(mask)
    return groups


def _spectral_side(pe: PseudoExpectation) -> np.ndarray:
    """Rows on the positive side of the top eigenvector of ``pE w w^T - pE w pE w^T``."""
    y = pe.first_moments
    C = pe.second_moments - np.outer(y, y)
    vals, vecs = np.linalg.eigh(0.5 * (C + C.T))
    v = vecs[:, -1]
    # orient deterministically: the side containing the largest |v_i| is positive
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    return np.flatnonzero(v > 0)


def _pad_trim(X: np.ndarray, R: np.ndarray, size: int, eps: float) -> np.ndarray:
    """The ``size`` rows nearest to the selection's Gaussian (Mahalanobis distance)."""
    n, d = X.shape
    Y = X[R]
    if len(R) >= 10 * d:
        g = robust_gaussian(Y, min(eps, 0.2))
        mu, cov = g.mean, g.covariance
    else:
        mu = Y.mean(axis=0)
        diff = X - mu
        cov = diff.T @ diff / n
    cov = 0.5 * (cov + cov.T) + 1e-10 * max(np.trace(cov) / d, 1e-300) * np.eye(d)
    vals, vecs = np.linalg.eigh(cov)
    Z = (X - mu) @ vecs / np.sqrt(np.maximum(vals, 1e-300))
    dist = np.sum(Z * Z, axis=1)
    return np.sort(np.argsort(dist, kind="stable")[:size])


def _candidate_sides(X, rounded: RoundedSubsets, b: int, params: ClusterParams, events: list, path):
    n = X.shape[0]
    groups = _group_subsets(rounded.subsets, n, params.jaccard)[: params.max_groups]
    raw = []
    if rounded.pseudoexpectations:
        raw.append(("spectral", _spectral_side(rounded.pseudoexpectations[0])))
    G = len(groups)
    for code in range(1, 2**G):
        mask = np.zeros(n, dtype=bool)
        for g in range(G):
            if code >> g & 1:
                mask |= groups[g]
        raw.append((f"union:{code}", np.flatnonzero(mask)))
    sides, seen = [], set()
    for label, R in raw:
        if len(R) == 0 or len(R) == n:
            events.append({"node": list(path), "candidate": label, "note": "empty side dropped"})
            continue
        size = int(min(max(round(len(R) / b), 1), n // b - 1)) * b
        S = _pad_trim(X, R, size, params.eps)
        comp_key = tuple(np.setdiff1d(np.arange(n), S))
        key = tuple(S)
        if key in seen or comp_key in seen:
            continue
        seen.add(key)
        sides.append((label, S))
        if len(sides) >= params.max_sides:
            break
    return sides


def _cluster_node(X, idx, b, params: ClusterParams, seed: int, path: tuple, events: list):
    """Return a list of ``(clustering, provenance)`` for rows ``idx`` (original indices)."""
    n = len(idx)
    if n <= 1.1 * b:
        return [([idx], [{"node": list(path), "leaf": True, "size": n}])]
    k_node = n // b
    sub = X[idx]
    node_seed = np.random.SeedSequence([seed, *path])
    s_whiten, s_split = (int(s.generate_state(1)[0]) for s in node_seed.spawn(2))
    try:
        wh, _ = fit_whitening(sub, k_node, eps=params.eps, seed=s_whiten)
        ax = encode_axioms(
            sub, k_node, params.t, params.delta, params.eps, wh,
            degree=params.degree, c_corr=params.c_corr, cap_quantile=params.cap_quantile,
        )
        rounded = split(ax, params.eta, s_split, c_m=params.c_m, tol=params.tol)
    except (Infeasible, DegenerateSelection) as exc:
        events.append({"node": list(path), "note": f"split failed: {type(exc).__name__}"})
        return []
    out = []
    for j, (label, S) in enumerate(_candidate_sides(sub, rounded, b, params, events, path)):
        T = np.setdiff1d(np.arange(n), S)
        left = _cluster_node(X, idx[S], b, params, seed, path + (j, 0), events)
        right = _cluster_node(X, idx[T], b, params, seed, path + (j, 1), events)
        step = {"node": list(path), "side": j, "candidate": label, "sizes": [len(S), len(T)]}
        for cl, pl in left:
            for cr, pr in right:
                out.append((cl + cr, [step] + pl + pr))
    return out


def _canonical(clustering: list) -> tuple:
    return tuple(sorted(tuple(int(i) for i in blk) for blk in clustering))


def cluster(
    points: np.ndarray,
    k: int,
    params: ClusterParams = ClusterParams(),
    seed: int = 0,
) -> CandidateClusteringSet:
    """Candidate clusterings of the rows of ``points`` into ``k`` equal blocks.

    Parameters
    ----------
    points : ndarray, shape (n, d)
    k : int
        ``n`` must be divisible by ``k``.
    params : ClusterParams
    seed : int
        Each recursion node draws from ``SeedSequence([seed, *path])`` so the
        output is reproducible and independent of evaluation order.

    Returns
    -------
    CandidateClusteringSet
        Empty when the top-level relaxation is infeasible.

    Warns
    -----
    BudgetExceeded
        More than ``params.max_candidates`` clusterings were found; the list
        is truncated.
    """
    X = np.asarray(points, dtype=float)
    n = X.shape[0]
    if k < 1 or n % k:
        raise InvalidShape(f"n = {n} is not divisible by k = {k}")
    N = params.N or n
    if N % k:
        raise InvalidShape("N must be divisible by k")
    b = N // k
    if n % b:
        raise InvalidShape("n must be a multiple of the block size N / k")
    events: list = []
    found = _cluster_node(X, np.arange(n), b, params, seed, (), events)
    clusterings, provenance, seen = [], [], set()
    for cl, prov in found:
        key = _canonical(cl)
        if key in seen:
            continue
        seen.add(key)
        clusterings.append([np.asarray(blk, dtype=int) for blk in sorted(key)])
        provenance.append(prov)
    exceeded = len(clusterings) > params.max_candidates
    if exceeded:
        warnings.warn(
            f"{len(clusterings)} candidate clusterings truncated to {params.max_candidates}",
            BudgetExceeded,
            stacklevel=2,
        )
        clusterings = clusterings[: params.max_candidates]
        provenance = provenance[: params.max_candidates]
        events.append({"node": [], "note": "candidate budget exceeded"})
    return CandidateClusteringSet(clusterings, provenance, events, exceeded)


def agreement(labels_true: np.ndarray, blocks: Sequence[np.ndarray], mask: Optional[np.ndarray] = None) -> float:
    """Fraction of rows (within ``mask``) whose block matches their true label under the best matching."""
    from scipy.optimize import linear_sum_assignment

    labels_true = np.asarray(labels_true)
    n = len(labels_true)
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, bool)
    pred = np.full(n, -1)
    for b, blk in enumerate(blocks):
        pred[blk] = b
    K = max(len(blocks), int(labels_true.max()) + 1)
    C = np.zeros((K, K))
    for p, t in zip(pred[mask], labels_true[mask]):
        if p >= 0:
            C[p, t] += 1
    r, c = linear_sum_assignment(-C)
    return float(C[r, c].sum() / max(mask.sum(), 1))


def weights_to_uniform(m: MixtureModel, tol: float = 0.05) -> tuple[MixtureModel, list]:
    """Replace a weighted mixture by a uniform one with repeated components.

    Component ``i`` is repeated ``c_i = round(w_i / w_min)`` times.

    Returns
    -------
    (MixtureModel, list of int)
        The uniform mixture and, for each of its components, the index of
        the original component.

    Raises
    ------
    WeightsNotCommensurate
        Some ratio ``w_i / w_min`` is further than ``tol`` (relative) from
        an integer.
    """
    w = np.asarray(m.weights, float)
    if np.any(w <= 0):
        raise InvalidParameter("all weights must be positive")
    ratios = w / w.min()
    counts = np.rint(ratios).astype(int)
    err = np.abs(ratios - counts) / ratios
    if np.any(err > tol):
        worst = int(np.argmax(err))
        raise WeightsNotCommensurate(
            f"weight ratio {ratios[worst]:.4g} is {err[worst]:.3g} (relative) from an integer"
        )
    comps, mapping = [], []
    for i, (c, g) in enumerate(zip(counts, m.components)):
        comps.extend([g] * int(c))
        mapping.extend([i] * int(c))
    return MixtureModel.uniform(comps), mapping
