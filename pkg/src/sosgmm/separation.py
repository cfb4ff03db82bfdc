"""Overlap between Gaussians and the three-way separation taxonomy.

Two Gaussians with tiny overlap are either mean separated in some
direction, variance separated in some direction, or far apart in relative
Frobenius norm.  This module computes the statistics behind that
classification, the Hellinger/TV quantities used to bracket overlap, and
a partitioner that splits a whole mixture along one of the three cases.
"""

from __future__ import annotations

import enum
import itertools
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy import linalg

from .errors import InvalidEpsilon, NoPartitionFound, SingularCovariance
from .gaussians import GaussianParams, MixtureModel, log_density_batch

__all__ = [
    "SeparationCase",
    "PartitionCase",
    "SeparationVerdict",
    "MixturePartition",
    "MCEstimate",
    "hellinger_sq",
    "tv_bracket",
    "tv_monte_carlo",
    "overlap_h",
    "separation_statistics",
    "classify_separation",
    "partition_mixture",
    "log_ratio_bound_holds",
]


class SeparationCase(str, enum.Enum):
    MEAN = "MeanSeparated"
    VARIANCE = "VarianceSeparated"
    COVARIANCE = "CovarianceSeparated"
    NONE = "NotSeparated"


class PartitionCase(str, enum.Enum):
    HYPERPLANE = "Hyperplane"
    HIGH_LOW_VARIANCE = "HighLowVariance"
    ALL_COVARIANCE = "AllCovarianceSeparated"


@dataclass(frozen=True)
class SeparationVerdict:
    """Outcome of :func:`classify_separation`.

    ``statistics`` holds all three raw statistics and ``thresholds`` the
    values they were compared against, whichever case fired.
    """

    case: SeparationCase
    witness_direction: Optional[np.ndarray]
    witness_value: float
    eps: float
    statistics: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "case": self.case.value,
            "witness_direction": None
            if self.witness_direction is None
            else self.witness_direction.tolist(),
            "witness_value": self.witness_value,
            "eps": self.eps,
            "statistics": self.statistics,
            "thresholds": self.thresholds,
        }


@dataclass(frozen=True)
class MixturePartition:
    side_a: tuple
    side_b: tuple
    case: PartitionCase
    direction: Optional[np.ndarray] = None
    threshold: Optional[float] = None

    def __post_init__(self):
        a, b = set(self.side_a), set(self.side_b)
        if self.case is not PartitionCase.ALL_COVARIANCE:
            if not a or not b or a & b:
                raise ValueError("partition sides must be nonempty and disjoint")

    def to_dict(self) -> dict:
        return {
            "side_a": list(self.side_a),
            "side_b": list(self.side_b),
            "case": self.case.value,
            "direction": None if self.direction is None else self.direction.tolist(),
            "threshold": self.threshold,
        }


class MCEstimate(NamedTuple):
    value: float
    stderr: float


def _chol_logdet(S: np.ndarray):
    try:
        L = linalg.cholesky(S, lower=True)
    except linalg.LinAlgError as exc:
        raise SingularCovariance("covariance is not positive definite") from exc
    return L, 2.0 * float(np.sum(np.log(np.diag(L))))


def hellinger_sq(p: GaussianParams, q: GaussianParams) -> float:
    """Squared Hellinger distance between two Gaussians.

    Uses the closed form, evaluated through log-determinants so that the
    result is exactly symmetric in ``(p, q)`` and does not overflow.

    Examples
    --------
    >>> g0 = GaussianParams([0.0], [[1.0]]); g1 = GaussianParams([2.0], [[1.0]])
    >>> round(hellinger_sq(g0, g1), 5)
    0.39347
    """
    _, ld1 = _chol_logdet(p.covariance)
    _, ld2 = _chol_logdet(q.covariance)
    mid = 0.5 * (p.covariance + q.covariance)
    Lm, ldm = _chol_logdet(mid)
    delta = p.mean - q.mean
    z = linalg.solve_triangular(Lm, delta, lower=True)
    log_bc = 0.25 * ld1 + 0.25 * ld2 - 0.5 * ldm - 0.125 * float(z @ z)
    return float(min(1.0, max(0.0, -np.expm1(log_bc))))


def tv_bracket(p: GaussianParams, q: GaussianParams) -> tuple[float, float]:
    """Lower and upper bounds ``(H^2, sqrt(H^2 (2 - H^2)))`` on TV(p, q)."""
    h2 = hellinger_sq(p, q)
    return h2, float(np.sqrt(max(h2 * (2.0 - h2), 0.0)))


def tv_monte_carlo(p: GaussianParams, q: GaussianParams, samples: int = 10**6, seed: int = 0) -> MCEstimate:
    """Two-sided Monte Carlo estimate of TV(p, q) with its standard error.

    Half of the budget is drawn from each distribution and
    ``TV = 1/2 E_p[(1 - q/p)^+] + 1/2 E_q[(1 - p/q)^+]`` is averaged.
    """
    if samples < 1:
        raise ValueError("samples must be positive")
    rng = np.random.default_rng(seed)
    n_p = max(1, samples // 2)
    n_q = max(1, samples - n_p)

    def side(a: GaussianParams, b: GaussianParams, n: int):
        x = rng.standard_normal((n, a.dim)) @ linalg.cholesky(a.covariance, lower=True).T + a.mean
        r = np.exp(np.minimum(log_density_batch(b, x) - log_density_batch(a, x), 0.0))
        return 1.0 - r

    f_p = side(p, q, n_p)
    f_q = side(q, p, n_q)
    value = 0.5 * (f_p.mean() + f_q.mean())
    var = 0.25 * (f_p.var() / n_p + f_q.var() / n_q)
    return MCEstimate(float(np.clip(value, 0.0, 1.0)), float(np.sqrt(var)))


def overlap_h(p: GaussianParams, q: GaussianParams, samples: int = 10**5, seed: int = 0, max_h: float = 40.0) -> float:
    """Negative log overlap ``-log(1 - TV)`` from the Monte Carlo TV estimate.

    Overlaps below ``exp(-max_h)`` are indistinguishable at any feasible
    sample size, so the value is clamped to ``max_h``.
    """
    tv = tv_monte_carlo(p, q, samples, seed).value
    overlap = 1.0 - tv
    if overlap <= np.exp(-max_h):
        return float(max_h)
    return float(min(max_h, -np.log(overlap)))


def _check_eps(eps: float):
    if not 0 < eps < 1:
        raise InvalidEpsilon(f"eps must lie in (0, 1), got {eps}")
    if np.log(np.log(1.0 / eps)) <= 0:
        raise InvalidEpsilon(f"log log(1/eps) must be positive, got eps={eps}")


def separation_statistics(p: GaussianParams, q: GaussianParams) -> dict:
    """Raw affine-invariant statistics of a pair.

    Returns
    -------
    dict
        ``mean_stat`` (delta^T (S_p + S_q)^{-1} delta), ``mean_direction``,
        ``pencil_eigenvalues`` (ascending generalized eigenvalues of
        ``(S_q, S_p)``), ``pencil_vectors``, ``variance_stat`` and
        ``frobenius_stat``.
    """
    delta = p.mean - q.mean
    ssum = p.covariance + q.covariance
    u = linalg.solve(ssum, delta, assume_a="pos")
    mean_stat = float(delta @ u)
    nrm = np.linalg.norm(u)
    mean_dir = u / nrm if nrm > 0 else None
    lam, vecs = linalg.eigh(q.covariance, p.covariance)
    variance_stat = float(max(lam[-1], 1.0 / lam[0]))
    frob = float(np.sum((1.0 - lam) ** 2))
    return {
        "mean_stat": mean_stat,
        "mean_direction": mean_dir,
        "pencil_eigenvalues": lam,
        "pencil_vectors": vecs,
        "variance_stat": variance_stat,
        "frobenius_stat": frob,
    }


def classify_separation(p: GaussianParams, q: GaussianParams, eps: float, c3: float = 0.1) -> SeparationVerdict:
    """Decide which of the three separation cases a pair of Gaussians is in.

    Cases are tested in the order mean, variance, covariance and the first
    one whose statistic reaches its threshold is returned.

    Parameters
    ----------
    p, q : GaussianParams
    eps : float
        Overlap scale; thresholds grow as ``eps`` shrinks.
    c3 : float
        Constant in the covariance-case threshold.
    """
    _check_eps(eps)
    log_inv = np.log(1.0 / eps)
    thr = {
        "mean": (log_inv ** (1.0 / 3.0)) / 100.0,
        "variance": log_inv ** (1.0 / 6.0),
        "covariance": c3 * log_inv / np.log(log_inv),
    }
    st = separation_statistics(p, q)
    lam = st["pencil_eigenvalues"]
    stats = {
        "mean_stat": st["mean_stat"],
        "variance_stat": st["variance_stat"],
        "pencil_eigenvalues": lam.tolist(),
        "frobenius_stat": st["frobenius_stat"],
    }
    if st["mean_stat"] >= thr["mean"]:
        return SeparationVerdict(SeparationCase.MEAN, st["mean_direction"], st["mean_stat"], eps, stats, thr)
    if st["variance_stat"] >= thr["variance"]:
        idx = -1 if lam[-1] >= 1.0 / lam[0] else 0
        v = st["pencil_vectors"][:, idx]
        v = v / np.linalg.norm(v)
        return SeparationVerdict(SeparationCase.VARIANCE, v, st["variance_stat"], eps, stats, thr)
    if st["frobenius_stat"] >= thr["covariance"]:
        return SeparationVerdict(SeparationCase.COVARIANCE, None, st["frobenius_stat"], eps, stats, thr)
    return SeparationVerdict(SeparationCase.NONE, None, st["frobenius_stat"], eps, stats, thr)


def _candidate_directions(m: MixtureModel, n_random: int, seed: int) -> list:
    dirs = []
    for a, b in itertools.combinations(range(m.k), 2):
        ga, gb = m.components[a], m.components[b]
        u = linalg.solve(ga.covariance + gb.covariance, ga.mean - gb.mean, assume_a="pos")
        if np.linalg.norm(u) > 0:
            dirs.append(u)
        _, vecs = linalg.eigh(ga.covariance, gb.covariance)
        dirs.append(vecs[:, 0])
        dirs.append(vecs[:, -1])
    rng = np.random.default_rng(seed)
    dirs.extend(rng.standard_normal((n_random, m.dim)))
    return [v / np.linalg.norm(v) for v in dirs if np.linalg.norm(v) > 0]


def partition_mixture(
    m: MixtureModel,
    eps: float,
    C: float = 1.0,
    Cprime: float = 1.0,
    c3: float = 0.1,
    n_random: int = 64,
    seed: int = 0,
) -> MixturePartition:
    """Split the components of a mixture into two well-separated groups.

    Searches the candidate directions for a hyperplane split (mean case) or
    a high/low variance split; if neither exists, certifies that every pair
    is covariance separated.

    Raises
    ------
    NoPartitionFound
        When none of the three cases can be certified.
    """
    k = m.k
    if k < 2:
        raise ValueError("partition_mixture needs at least two components")
    for a, b in itertools.combinations(range(k), 2):
        lo, _ = tv_bracket(m.components[a], m.components[b])
        if lo < 1 - eps:
            warnings.warn(
                f"components {a} and {b} overlap more than eps allows (TV lower bound {lo:.3g})",
                stacklevel=2,
            )
            break
    Sigma = m.covariance()
    dirs = _candidate_directions(m, n_random, seed)
    for v in dirs:
        proj = np.array([c.mean @ v for c in m.components])
        var = np.array([v @ c.covariance @ v for c in m.components])
        total = float(v @ Sigma @ v)
        order = np.argsort(proj, kind="stable")
        for cut in range(1, k):
            left, right = order[:cut], order[cut:]
            ok = all(
                (proj[a] - proj[b]) ** 2 >= max(k**C * (var[a] + var[b]), total / k**2)
                for a in left
                for b in right
            )
            if ok:
                t = 0.5 * (proj[order[cut - 1]] + proj[order[cut]])
                return MixturePartition(
                    tuple(sorted(int(i) for i in left)),
                    tuple(sorted(int(i) for i in right)),
                    PartitionCase.HYPERPLANE,
                    v,
                    float(t),
                )
    for v in dirs:
        var = np.array([v @ c.covariance @ v for c in m.components])
        total = float(v @ Sigma @ v)
        order = np.argsort(-var, kind="stable")
        for i in range(2, k + 1):  # 1-based position in the descending order
            if var[order[i - 1]] <= k ** (-(Cprime**i)) * total:
                high, low = order[: i - 1], order[i - 1 :]
                return MixturePartition(
                    tuple(sorted(int(j) for j in high)),
                    tuple(sorted(int(j) for j in low)),
                    PartitionCase.HIGH_LOW_VARIANCE,
                    v,
                )
    need = c3 * k ** (Cprime**k + C + 1)
    frob_ok = all(
        separation_statistics(m.components[a], m.components[b])["frobenius_stat"] >= need
        for a, b in itertools.combinations(range(k), 2)
    )
    if frob_ok:
        return MixturePartition((), (), PartitionCase.ALL_COVARIANCE)
    raise NoPartitionFound("no hyperplane, variance or covariance split could be certified")


def log_ratio_bound_holds(a: float, x: np.ndarray, const: float = 10.0) -> np.ndarray:
    """Check ``min(|log x|, (log x)^2) <= const * log(a) * (1 - x)^2`` pointwise.

    This is the elementary inequality behind the covariance case of the
    taxonomy, valid for ``x`` in ``[1/a, a]`` and ``a >= e``.
    """
    x = np.asarray(x, dtype=float)
    lx = np.log(x)
    lhs = np.minimum(np.abs(lx), lx**2)
    return lhs <= const * np.log(a) * (1.0 - x) ** 2 + 1e-15
