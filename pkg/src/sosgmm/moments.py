"""Gaussian moment tensors and sample-level moment conditions.

Symmetric tensors are stored by multiset index: one value per sorted
index tuple together with the number of ordered tuples it stands for, so
Frobenius norms agree exactly with the dense tensor.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .errors import DegenerateSubset, InvalidPartition, NoRoot
from .gaussians import GaussianParams, SampleSet

__all__ = [
    "MomentTensor",
    "ConditionReport",
    "multisets",
    "double_factorial",
    "gaussian_moment_tensor",
    "empirical_whitened_tensor",
    "whiten",
    "check_deterministic_conditions",
    "practical_threshold",
    "moment_match_counterexample",
    "counterexample_polynomial",
    "two_component_moments",
    "identifiability_gap",
    "IdentifiabilityDiagnostic",
]


def double_factorial(m: int) -> int:
    """``m!!`` with the convention ``(-1)!! = 0!! = 1``."""
    out = 1
    while m > 1:
        out *= m
        m -= 2
    return out


@lru_cache(maxsize=None)
def multisets(d: int, s: int) -> tuple:
    """Sorted index tuples of length ``s`` over ``range(d)``, lexicographic."""
    return tuple(itertools.combinations_with_replacement(range(d), s))


@lru_cache(maxsize=None)
def _multiplicities(d: int, s: int) -> np.ndarray:
    fact = math.factorial(s)
    out = []
    for idx in multisets(d, s):
        counts = np.bincount(np.asarray(idx, dtype=int), minlength=d) if s else np.zeros(d, int)
        out.append(fact // math.prod(math.factorial(int(c)) for c in counts))
    return np.asarray(out, dtype=float)


@dataclass(frozen=True, eq=False)
class MomentTensor:
    """Symmetric ``s``-way tensor over ``R^d`` in multiset layout.

    ``values[i]`` belongs to ``multisets(d, s)[i]``.
    """

    order: int
    dim: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).copy()
        if v.shape != (len(multisets(self.dim, self.order)),):
            raise ValueError("values do not match the multiset layout")
        if not np.all(np.isfinite(v)):
            raise ValueError("tensor entries must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def weights(self) -> np.ndarray:
        return _multiplicities(self.dim, self.order)

    def entry(self, *idx: int) -> float:
        """Value at an index tuple (0-based, any order)."""
        if len(idx) != self.order:
            raise IndexError(f"expected {self.order} indices")
        key = tuple(sorted(int(i) for i in idx))
        return float(self.values[_position(self.dim, self.order)[key]])

    def frobenius_norm(self) -> float:
        return float(np.sqrt(np.sum(self.weights * self.values**2)))

    def __sub__(self, other: "MomentTensor") -> "MomentTensor":
        if (self.order, self.dim) != (other.order, other.dim):
            raise ValueError("tensor shapes differ")
        return MomentTensor(self.order, self.dim, self.values - other.values)

    def full(self) -> np.ndarray:
        """Dense ``(d,)*s`` array (use for small ``d`` and ``s`` only)."""
        out = np.zeros((self.dim,) * self.order)
        for val, idx in zip(self.values, multisets(self.dim, self.order)):
            for perm in set(itertools.permutations(idx)):
                out[perm] = val
        return out

    @classmethod
    def from_full(cls, arr: np.ndarray) -> "MomentTensor":
        arr = np.asarray(arr, dtype=float)
        s, d = arr.ndim, (arr.shape[0] if arr.ndim else 1)
        return cls(s, d, np.array([arr[idx] for idx in multisets(d, s)]))

    def to_dict(self) -> dict:
        return {"order": self.order, "dim": self.dim, "values": self.values.tolist()}


@lru_cache(maxsize=None)
def _position(d: int, s: int) -> dict:
    return {idx: i for i, idx in enumerate(multisets(d, s))}


def gaussian_moment_tensor(s: int, d: int) -> MomentTensor:
    """``E g^{(x) s}`` for ``g ~ N(0, I_d)`` via the Wick/Isserlis formula.

    An entry is zero when some coordinate appears an odd number of times and
    otherwise the product of ``(m_c - 1)!!`` over coordinate multiplicities
    ``m_c``.  All entries are exact integers.
    """
    if s < 0 or d < 1:
        raise ValueError("need s >= 0 and d >= 1")
    vals = []
    for idx in multisets(d, s):
        counts = np.bincount(np.asarray(idx, dtype=int), minlength=d) if s else np.zeros(d, int)
        if np.any(counts % 2):
            vals.append(0.0)
        else:
            vals.append(float(math.prod(double_factorial(int(c) - 1) for c in counts)))
    return MomentTensor(s, d, np.array(vals))


def _tensor_from_rows(Z: np.ndarray, s: int) -> MomentTensor:
    """Average of ``z^{(x) s}`` over the rows of ``Z`` in multiset layout."""
    n, d = Z.shape
    vals = np.empty(len(multisets(d, s)))
    if s == 0:
        vals[0] = 1.0
        return MomentTensor(0, d, vals)
    # reuse prefix products: multisets are lexicographic so consecutive ones share prefixes
    cache: dict = {(): np.ones(n)}

    def prod(prefix):
        if prefix not in cache:
            cache[prefix] = prod(prefix[:-1]) * Z[:, prefix[-1]]
        return cache[prefix]

    for i, idx in enumerate(multisets(d, s)):
        vals[i] = np.mean(prod(idx[:-1]) * Z[:, idx[-1]])
    return MomentTensor(s, d, vals)


def whiten(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Center and whiten rows by the symmetric inverse square root of their covariance.

    Returns ``(Z, mean, W)`` with ``Z = (X - mean) @ W`` (``W`` symmetric).
    The covariance uses the ``1/n`` normalization.
    """
    X = np.asarray(points, dtype=float)
    n, d = X.shape
    if n < d + 1:
        raise DegenerateSubset(f"need at least d + 1 = {d + 1} points, got {n}")
    mu = X.mean(axis=0)
    Xc = X - mu
    cov = Xc.T @ Xc / n
    vals, vecs = np.linalg.eigh(cov)
    if vals[0] <= 1e-12 * max(vals[-1], 1e-300):
        raise DegenerateSubset("empirical covariance is singular")
    W = (vecs / np.sqrt(vals)) @ vecs.T
    return Xc @ W, mu, W


def empirical_whitened_tensor(points: np.ndarray, subset: Optional[Sequence[int]], s: int) -> MomentTensor:
    """Empirical ``s``-th moment tensor of a subset after exact whitening.

    Parameters
    ----------
    points : ndarray, shape (n, d)
    subset : sequence of int or None
        Rows to use (all when None).
    s : int
        Tensor order.
    """
    X = np.asarray(points, dtype=float)
    if subset is not None:
        X = X[np.asarray(subset, dtype=int)]
    Z, _, _ = whiten(X)
    return _tensor_from_rows(Z, s)


# ---------------------------------------------------------------------------
# deterministic conditions


@dataclass(frozen=True)
class ConditionReport:
    """Outcome of :func:`check_deterministic_conditions`.

    ``moment_residuals[(a, s)]`` is the squared Frobenius distance of block
    ``a``'s whitened ``s``-th moment tensor from the Gaussian one and
    ``thresholds[(a, s)]`` what it was compared against.
    ``event_fractions[a]`` holds the smallest measured fraction of each
    event family over the test directions.
    """

    moment_residuals: dict
    thresholds: dict
    event_fractions: dict
    passed: bool
    params: dict
    condition1_passed: bool = True
    condition2_passed: bool = True

    def to_dict(self) -> dict:
        return {
            "moment_residuals": [
                {"block": a, "order": s, "residual": v, "threshold": self.thresholds[(a, s)]}
                for (a, s), v in sorted(self.moment_residuals.items())
            ],
            "event_fractions": {str(a): v for a, v in self.event_fractions.items()},
            "condition1_passed": self.condition1_passed,
            "condition2_passed": self.condition2_passed,
            "passed": self.passed,
            "params": self.params,
        }


def practical_threshold(delta: float, s: int, block_size: int) -> float:
    """Default condition-1 threshold ``delta * s! * 1.5^s / sqrt(block_size)``."""
    return delta * math.factorial(s) * 1.5**s / math.sqrt(block_size)


def _count_far_pairs(p: np.ndarray, r: float) -> int:
    """Number of ordered pairs (i, j) with ``|p_i - p_j| >= r``."""
    q = np.sort(p)
    lo = np.searchsorted(q, q - r, side="right")  # j with q_j <= q_i - r
    hi = np.searchsorted(q, q + r, side="left")  # j with q_j >= q_i + r
    return int(np.sum(lo) + np.sum(q.size - hi))


def _pair_quadratic_fraction(Xc: np.ndarray, A: np.ndarray, center: float, radius: float, pairs) -> float:
    if pairs is None:
        q = np.einsum("ij,jk,ik->i", Xc, A, Xc)
        cross = Xc @ A @ Xc.T
        val = q[:, None] + q[None, :] - 2.0 * cross
        return float(np.mean(np.abs(val - center) <= radius))
    i, j = pairs
    D = Xc[i] - Xc[j]
    val = np.einsum("ij,jk,ik->i", D, A, D)
    return float(np.mean(np.abs(val - center) <= radius))


def check_deterministic_conditions(
    s: SampleSet,
    partition: Sequence[Sequence[int]],
    delta: float,
    xi: float,
    t: int,
    n_dirs: int = 50,
    seed: int = 0,
    *,
    params: Optional[Sequence[GaussianParams]] = None,
    literal_threshold: bool = False,
    threshold: Optional[float] = None,
    c_E: float = 2.0,
    c_F: float = 0.01,
    c_G: float = 3.0,
    max_pairs: int = 1_000_000,
) -> ConditionReport:
    """Check the two sample-level conditions on a partition.

    Condition 1 compares every block's whitened moment tensors of order
    ``1..t`` with the Gaussian ones.  Condition 2 measures, over random and
    extremal test directions ``v`` and matrices ``A``, the fractions of
    points (or ordered pairs) in the events

    * E: ``<X - mu_a, v>^2 <= c_E log(1/xi) <v, S_a v>``
    * F: ``<X_i - X_j, v>^2 >= c_F xi <v, S_a v>``
    * G: ``|<D, A D> - 2 <S_a, A>| <= c_G log(1/xi) ||S_a A||_F`` with ``D = X_i - X_j``

    and requires each to be at least ``1 - xi``.

    Parameters
    ----------
    s : SampleSet
    partition : list of index arrays
        Disjoint blocks of equal size.
    delta, xi : float
        Moment slack and failure fraction.
    t : int
        Highest moment order.
    n_dirs : int
        Number of random directions and of random symmetric matrices.
    params : list of GaussianParams, optional
        Ground-truth block parameters; empirical block moments otherwise.
    literal_threshold : bool
        Use ``d^{-2t} delta`` instead of the practical threshold.
    threshold : float, optional
        Override for the condition-1 threshold at every order.
    max_pairs : int
        Pair events are counted exactly when a block has at most this many
        ordered pairs, else estimated from that many random pairs.
    """
    X = s.points
    n, d = X.shape
    blocks = [np.asarray(b, dtype=int) for b in partition]
    if any(b.size == 0 for b in blocks):
        raise InvalidPartition("empty partition block")
    flat = np.concatenate(blocks)
    if np.unique(flat).size != flat.size:
        raise InvalidPartition("partition blocks overlap")
    if len({b.size for b in blocks}) != 1:
        raise InvalidPartition("partition blocks must have equal size")
    rng = np.random.default_rng(seed)
    block_size = blocks[0].size

    residuals, thresholds = {}, {}
    cond1 = True
    for a, b in enumerate(blocks):
        Z, _, _ = whiten(X[b])
        for order in range(1, t + 1):
            diff = _tensor_from_rows(Z, order) - gaussian_moment_tensor(order, d)
            r = diff.frobenius_norm() ** 2
            if threshold is not None:
                thr = threshold
            elif literal_threshold:
                thr = d ** (-2 * t) * delta
            else:
                thr = practical_threshold(delta, order, block_size)
            residuals[(a, order)] = r
            thresholds[(a, order)] = thr
            cond1 &= r <= thr

    # block parameters for condition 2
    if params is not None:
        if len(params) != len(blocks):
            raise InvalidPartition("one parameter set per block is required")
        means = [np.asarray(p.mean) for p in params]
        covs = [np.asarray(p.covariance) for p in params]
    else:
        means = [X[b].mean(axis=0) for b in blocks]
        covs = [np.cov(X[b], rowvar=False, bias=True).reshape(d, d) for b in blocks]

    dirs = list(rng.standard_normal((n_dirs, d)))
    for a in range(len(blocks)):
        dirs.extend(np.linalg.eigh(covs[a])[1].T)
        for b in range(a + 1, len(blocks)):
            dirs.append(means[a] - means[b])
    dirs = [v / np.linalg.norm(v) for v in dirs if np.linalg.norm(v) > 1e-12]
    mats = []
    for _ in range(n_dirs):
        G = rng.standard_normal((d, d))
        mats.append(0.5 * (G + G.T))
    for a in range(len(blocks)):
        for b in range(a + 1, len(blocks)):
            if np.linalg.norm(covs[a] - covs[b]) > 1e-12:
                mats.append(covs[a] - covs[b])

    log_term = math.log(1.0 / xi) if xi < 1 else 0.0
    fractions = {}
    cond2 = True
    need = 1.0 - xi
    for a, b in enumerate(blocks):
        Xc = X[b] - means[a]
        m = b.size
        pairs = None
        if m * m > max_pairs:
            pairs = (rng.integers(0, m, max_pairs), rng.integers(0, m, max_pairs))
        e_min = f_min = g_min = 1.0
        for v in dirs:
            proj = Xc @ v
            var = float(v @ covs[a] @ v)
            e_min = min(e_min, float(np.mean(proj**2 <= c_E * log_term * var)))
            r = math.sqrt(max(c_F * xi * var, 0.0))
            if pairs is None:
                frac = _count_far_pairs(proj, r) / (m * m) if r > 0 else 1.0
            else:
                diff = proj[pairs[0]] - proj[pairs[1]]
                frac = float(np.mean(diff**2 >= r * r))
            f_min = min(f_min, frac)
        for A in mats:
            center = 2.0 * float(np.sum(covs[a] * A))
            radius = c_G * log_term * float(np.linalg.norm(covs[a] @ A))
            g_min = min(g_min, _pair_quadratic_fraction(Xc, A, center, radius, pairs))
        fractions[a] = {"E": e_min, "F": f_min, "G": g_min}
        cond2 &= e_min >= need and f_min >= need and g_min >= need

    return ConditionReport(
        moment_residuals=residuals,
        thresholds=thresholds,
        event_fractions=fractions,
        passed=bool(cond1 and cond2),
        params={
            "delta": delta,
            "xi": xi,
            "t": t,
            "n_dirs": n_dirs,
            "seed": seed,
            "literal_threshold": literal_threshold,
            "c_E": c_E,
            "c_F": c_F,
            "c_G": c_G,
        },
        condition1_passed=bool(cond1),
        condition2_passed=bool(cond2),
    )


# ---------------------------------------------------------------------------
# moment matching counterexample


def counterexample_polynomial(alpha: float, t: int) -> float:
    """``a(1-a)^{2t} + (1-a)a^{2t} - (2t-1)!! a^t (1-a)^t`` at ``a = alpha``."""
    a, b = alpha, 1.0 - alpha
    return a * b ** (2 * t) + b * a ** (2 * t) - double_factorial(2 * t - 1) * a**t * b**t


def moment_match_counterexample(t: int, tol: float = 1e-10) -> tuple[float, float]:
    """Mixing weight at which a far-apart two-component mixture matches a Gaussian moment.

    For ``alpha N((1 - alpha) Delta, 1) + (1 - alpha) N(-alpha Delta, 1)`` the
    ``2t``-th moment equals ``(2t-1)!!`` times the ``t``-th power of the
    variance, as ``Delta -> infinity``, exactly at the root in ``(0, 1/2)``
    of :func:`counterexample_polynomial`.  Found by bisection.

    Returns
    -------
    alpha, residual : float
    """
    if t < 2:
        raise ValueError("t must be at least 2")
    lo, hi = 1e-12, 0.5
    flo, fhi = counterexample_polynomial(lo, t), counterexample_polynomial(hi, t)
    if np.sign(flo) == np.sign(fhi):
        raise NoRoot(f"no sign change of the moment equation on (0, 1/2) for t={t}")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        fm = counterexample_polynomial(mid, t)
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi = mid
    alpha = 0.5 * (lo + hi)
    return alpha, abs(counterexample_polynomial(alpha, t))


def _normal_raw_moment(m: float, p: int) -> float:
    """``E (m + Z)^p`` for standard normal ``Z``."""
    return sum(math.comb(p, j) * m ** (p - j) * (double_factorial(j - 1) if j % 2 == 0 else 0) for j in range(p + 1))


def two_component_moments(alpha: float, delta: float, p: int) -> float:
    """``E x^p`` under ``alpha N((1-alpha) delta, 1) + (1-alpha) N(-alpha delta, 1)``."""
    return alpha * _normal_raw_moment((1 - alpha) * delta, p) + (1 - alpha) * _normal_raw_moment(-alpha * delta, p)


# ---------------------------------------------------------------------------
# identifiability diagnostic


@dataclass(frozen=True)
class IdentifiabilityDiagnostic:
    subset_variance: float
    overlap_product: float
    mixture_variance: float
    direction: np.ndarray

    def to_dict(self) -> dict:
        return {
            "subset_variance": self.subset_variance,
            "overlap_product": self.overlap_product,
            "mixture_variance": self.mixture_variance,
            "direction": self.direction.tolist(),
        }


def identifiability_gap(
    s: SampleSet,
    subset: Sequence[int],
    a: int,
    b: int,
    v: np.ndarray,
    params: Optional[Sequence[GaussianParams]] = None,
) -> IdentifiabilityDiagnostic:
    """Variance of a subset along ``v`` next to how much it mixes clusters ``a`` and ``b``.

    The mixture variance is that of ``1/2 G_a + 1/2 G_b`` along ``v``, using
    ``params`` when given and otherwise the empirical moments of the
    labelled clusters (clean rows only, when a corruption mask is present).
    """
    if s.labels is None:
        raise ValueError("ground-truth labels are required")
    idx = np.asarray(subset, dtype=int)
    if idx.size == 0:
        raise ValueError("subset must be nonempty")
    v = np.asarray(v, dtype=float)
    v = v / np.linalg.norm(v)
    proj = s.points[idx] @ v
    var = float(np.var(proj))
    lab = s.labels[idx]
    overlap = float(np.sum(lab == a) * np.sum(lab == b)) / idx.size**2
    if params is not None:
        ga, gb = params[a], params[b]
        ma, mb = ga.mean @ v, gb.mean @ v
        va, vb = v @ ga.covariance @ v, v @ gb.covariance @ v
    else:
        clean = s.clean_mask()
        pa = s.points[(s.labels == a) & clean] @ v
        pb = s.points[(s.labels == b) & clean] @ v
        ma, mb, va, vb = pa.mean(), pb.mean(), pa.var(), pb.var()
    mix = 0.5 * (va + vb) + 0.25 * (ma - mb) ** 2
    return IdentifiabilityDiagnostic(var, overlap, float(mix), v)
