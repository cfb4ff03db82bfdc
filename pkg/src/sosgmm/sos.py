"""Pseudoexpectations over selection variables and the convex relaxation behind SPLIT.

A selection is a vector ``w in {0, 1}^n`` with ``sum(w) = n / k``.  A
pseudoexpectation of degree 2 is stored as the moment matrix over the basis
``(1, w_1, ..., w_n)``; degree 4 uses the multilinear basis of all index
sets of size at most two (booleanity makes ``w_i^2`` redundant, so the
basis ties are exact).

Moment closeness is expressed through pairwise differences.  For a fixed
whitening ``W`` put ``u_ij = W (X_i - X_j) / sqrt(2)``, radially capped at
``R``, and

    P_s(w) = (k / n)^2 * sum_{i != j} w_i w_j u_ij^{(x) s}.

For an exact selection of a Gaussian cluster whitened by its own
covariance, ``P_s`` matches the moments of a capped standard Gaussian, and
no center is needed.  Odd orders vanish identically because
``u_ji = -u_ij``, so only even ``s <= t`` produce constraints.  Degree 2
constrains ``||pE P_s - M_s||^2`` (a second-order cone in the moment
matrix); degree 4 constrains ``pE ||P_s - M_s||^2`` exactly, which is
linear in the degree-4 moments.  Degree 2 also imposes
``pE w_i w_j <= pE w_i``, which degree 4 derives on its own; without it
the rounding probabilities ``pE w_i w_j / pE w_i`` could exceed one.

Problems are solved with SCS through cvxpy.  The compiled problem is cached
on the axiom system with the objective as a parameter, so repeated solves
with different objectives (as in SPLIT) are warm started.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import cvxpy as cp
import numpy as np
from scipy import sparse, stats

from .errors import (
    DegenerateSelection,
    DegreeTooHigh,
    Infeasible,
    InvalidParameter,
    InvalidShape,
    SolverStall,
)
from .filtering import trimmed_covariance
from .moments import _multiplicities, gaussian_moment_tensor, multisets

__all__ = [
    "PseudoExpectation",
    "Whitening",
    "Tolerances",
    "LinearConstraint",
    "AxiomSystem",
    "encode_axioms",
    "solve_feasible",
    "pe_eval",
    "update_whitening",
    "fit_whitening",
    "capped_moment_factor",
    "polynomial",
    "MAX_DEGREE4_N",
]

MAX_DEGREE4_N = 24


# ---------------------------------------------------------------------------
# polynomials


def polynomial(
    linear: Optional[Sequence[float]] = None,
    quadratic: Optional[np.ndarray] = None,
    constant: float = 0.0,
) -> dict:
    """Build a polynomial in ``w`` as a ``{monomial: coefficient}`` dict.

    Monomials are sorted index tuples (``()`` is the constant, ``(i,)`` is
    ``w_i``, ``(i, j)`` is ``w_i w_j``).  ``quadratic`` is read as the matrix of
    the form ``w^T Q w``.
    """
    out: dict = {}
    if constant:
        out[()] = float(constant)
    if linear is not None:
        for i, c in enumerate(np.asarray(linear, float)):
            if c:
                out[(i,)] = out.get((i,), 0.0) + float(c)
    if quadratic is not None:
        Q = np.asarray(quadratic, float)
        for i, j in zip(*np.nonzero(Q)):
            key = (int(min(i, j)), int(max(i, j)))
            out[key] = out.get(key, 0.0) + float(Q[i, j])
    return out


def _check_poly(poly: Mapping) -> dict:
    out = {}
    for mono, c in poly.items():
        key = tuple(sorted(int(i) for i in mono))
        if not np.isfinite(c):
            raise InvalidParameter("polynomial coefficients must be finite")
        out[key] = out.get(key, 0.0) + float(c)
    return out


# ---------------------------------------------------------------------------
# pseudoexpectations


def _basis(n: int, degree: int) -> tuple:
    if degree == 2:
        return ((),) + tuple((i,) for i in range(n))
    if degree == 4:
        return ((),) + tuple((i,) for i in range(n)) + tuple(itertools.combinations(range(n), 2))
    raise InvalidParameter("degree must be 2 or 4")


@dataclass(frozen=True, eq=False)
class PseudoExpectation:
    """A degree-2 or degree-4 pseudoexpectation over ``w_1, ..., w_n``.

    Attributes
    ----------
    degree : int
    n : int
    moment_matrix : ndarray
        Symmetric, indexed by :attr:`basis`.
    residuals : dict
        Signed constraint residuals recorded when the object came out of a
        solve (empty for hand-built objects).
    status : str
    objective : float or None
    """

    degree: int
    n: int
    moment_matrix: np.ndarray
    residuals: dict = field(default_factory=dict)
    status: str = "constructed"
    objective: Optional[float] = None

    def __post_init__(self):
        M = np.array(self.moment_matrix, dtype=float)
        size = len(_basis(self.n, self.degree))
        if M.shape != (size, size):
            raise InvalidShape(f"moment matrix must be {size}x{size}, got {M.shape}")
        M = 0.5 * (M + M.T)
        M.setflags(write=False)
        object.__setattr__(self, "moment_matrix", M)

    @property
    def basis(self) -> tuple:
        return _basis(self.n, self.degree)

    @property
    def first_moments(self) -> np.ndarray:
        """``pE w_i`` for every ``i``."""
        return np.array(self.moment_matrix[0, 1 : self.n + 1])

    @property
    def second_moments(self) -> np.ndarray:
        """Matrix of ``pE w_i w_j`` (diagonal is ``pE w_i^2``)."""
        if self.degree == 2:
            return np.array(self.moment_matrix[1:, 1:])
        n = self.n
        Y = np.zeros((n, n))
        M = self.moment_matrix
        Y[np.diag_indices(n)] = M[0, 1 : n + 1]
        iu = np.triu_indices(n, 1)
        Y[iu] = M[0, n + 1 :]
        Y.T[iu] = M[0, n + 1 :]
        return Y

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.moment_matrix)[0])

    @classmethod
    def point_mass(cls, u: Sequence[float], degree: int = 2) -> "PseudoExpectation":
        """Expectation under the single assignment ``w = u``."""
        return cls.mixture([u], [1.0], degree)

    @classmethod
    def mixture(
        cls, assignments: Sequence[Sequence[float]], weights: Sequence[float], degree: int = 2
    ) -> "PseudoExpectation":
        """Expectation under a finite distribution over assignments."""
        U = np.atleast_2d(np.asarray(assignments, dtype=float))
        p = np.asarray(weights, dtype=float)
        if p.shape != (U.shape[0],) or np.any(p < 0) or abs(p.sum() - 1) > 1e-12:
            raise InvalidParameter("weights must be a probability vector, one per assignment")
        n = U.shape[1]
        basis = _basis(n, degree)
        V = np.ones((U.shape[0], len(basis)))
        for c, mono in enumerate(basis):
            for i in mono:
                V[:, c] *= U[:, i]
        return cls(degree, n, (V * p[:, None]).T @ V)

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "degree": self.degree,
            "n": self.n,
            "basis": [list(b) for b in self.basis],
            "moment_matrix": self.moment_matrix.tolist(),
            "residuals": {k: float(v) for k, v in self.residuals.items()},
            "status": self.status,
            "objective": self.objective,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PseudoExpectation":
        return cls(
            int(data["degree"]),
            int(data["n"]),
            np.asarray(data["moment_matrix"], float),
            dict(data.get("residuals", {})),
            data.get("status", "constructed"),
            data.get("objective"),
        )


def _entry(pe: PseudoExpectation, mono: tuple) -> float:
    M = pe.moment_matrix
    if pe.degree == 2:
        if len(mono) == 0:
            return M[0, 0]
        if len(mono) == 1:
            return M[0, mono[0] + 1]
        return M[mono[0] + 1, mono[1] + 1]
    key = tuple(sorted(set(mono)))
    pos = _basis_position(pe.n)
    if len(key) <= 2:
        return M[0, pos[key]]
    return M[pos[key[:2]], pos[key[2:]]]


_POSITIONS: dict = {}


def _basis_position(n: int) -> dict:
    if n not in _POSITIONS:
        _POSITIONS[n] = {b: i for i, b in enumerate(_basis(n, 4))}
    return _POSITIONS[n]


def pe_eval(pe: PseudoExpectation, poly: Mapping) -> float:
    """Apply ``pe`` to a polynomial given as ``{monomial: coefficient}``.

    Raises
    ------
    DegreeTooHigh
        Some monomial has more factors than ``pe.degree``.
    """
    total = 0.0
    for mono, c in poly.items():
        mono = tuple(sorted(int(i) for i in mono))
        if len(mono) > pe.degree:
            raise DegreeTooHigh(f"monomial {mono} exceeds degree {pe.degree}")
        if any(i < 0 or i >= pe.n for i in mono):
            raise InvalidParameter(f"monomial {mono} refers to a missing variable")
        total += c * _entry(pe, mono)
    return float(total)


# ---------------------------------------------------------------------------
# whitening


@dataclass(frozen=True, eq=False)
class Whitening:
    """Affine frame ``x -> W (x - center)`` together with the covariance it inverts."""

    W: np.ndarray
    center: np.ndarray
    covariance: np.ndarray

    @classmethod
    def from_covariance(cls, center: np.ndarray, cov: np.ndarray) -> "Whitening":
        cov = 0.5 * (np.asarray(cov, float) + np.asarray(cov, float).T)
        d = cov.shape[0]
        tr = float(np.trace(cov))
        if not np.isfinite(tr) or tr <= 0:
            raise DegenerateSelection("selection covariance vanishes")
        cov = cov + 1e-10 * tr / d * np.eye(d)
        vals, vecs = np.linalg.eigh(cov)
        if vals[0] <= 1e-12 * vals[-1]:
            raise DegenerateSelection("selection covariance is singular even after ridge")
        W = (vecs / np.sqrt(vals)) @ vecs.T
        return cls(W, np.asarray(center, float), cov)

    @classmethod
    def identity(cls, d: int) -> "Whitening":
        return cls(np.eye(d), np.zeros(d), np.eye(d))

    def to_dict(self) -> dict:
        return {"W": self.W.tolist(), "center": self.center.tolist()}


def update_whitening(points: np.ndarray, pe: PseudoExpectation) -> Whitening:
    """Frame of the selection described by ``pe``.

    The center is ``sum_i pE w_i X_i / sum_i pE w_i`` and the covariance
    the pairwise form ``sum_ij pE w_i w_j (X_i - X_j)(X_i - X_j)^T / (2 sum_ij pE w_i w_j)``,
    which reduces to the ``1/m`` covariance of the selected rows for a point
    mass and does not mix clusters when ``pe`` is a mixture of selections.

    Raises
    ------
    DegenerateSelection
        The covariance is singular even after a small ridge.
    """
    X = np.asarray(points, float)
    y = pe.first_moments
    Y = pe.second_moments
    tot1, tot2 = y.sum(), Y.sum()
    if tot1 <= 0 or tot2 <= 0:
        raise DegenerateSelection("pseudoexpectation selects nothing")
    center = y @ X / tot1
    r = Y.sum(axis=1)
    cov = (X.T * r) @ X - X.T @ Y @ X
    return Whitening.from_covariance(center, cov / tot2)


# ---------------------------------------------------------------------------
# constraints


@dataclass(frozen=True)
class Tolerances:
    """Acceptance tolerances and solver limits.

    ``tol_eq`` defaults to ``1e-6 * n``; inequality residuals are compared
    with ``tol_ineq * max(1, |bound|)``.
    """

    tol_psd: float = 1e-7
    tol_eq: Optional[float] = None
    tol_ineq: float = 1e-4
    tol_gap: float = 1e-3
    max_iters: int = 50_000
    solver_eps: float = 1e-6

    @classmethod
    def relaxed(cls) -> "Tolerances":
        """Looser settings for rounding inside CLUSTER, where only approximate moments matter."""
        return cls(tol_eq=1e-2, tol_ineq=1e-2, solver_eps=1e-4, max_iters=10_000)

    def eq(self, n: int) -> float:
        return self.tol_eq if self.tol_eq is not None else 1e-6 * n


@dataclass(frozen=True)
class LinearConstraint:
    """``pE poly == rhs`` or ``pE poly <= rhs`` for a polynomial of degree at most 2."""

    poly: Mapping
    rhs: float
    sense: str = "=="
    name: str = "linear"
    origin: str = "user"

    def __post_init__(self):
        if self.sense not in ("==", "<=", ">="):
            raise InvalidParameter("sense must be '==', '<=' or '>='")
        object.__setattr__(self, "poly", _check_poly(self.poly))

    def residual(self, pe: PseudoExpectation) -> float:
        v = pe_eval(pe, self.poly) - self.rhs
        if self.sense == "==":
            return abs(v)
        return v if self.sense == "<=" else -v


@dataclass(frozen=True, eq=False)
class MomentConstraint:
    """Closeness of the pairwise ``s``-th moment tensor to the capped Gaussian one.

    ``features`` has one row per multiset index and one column per pair
    ``i < j`` (ordering of ``numpy.triu_indices``), already multiplied by
    ``2 (k/n)^2`` and by ``sqrt(multiplicity / s!)``; ``target`` carries the
    same row scaling.  The residual is ``||features @ Y_upper - target||^2 - bound``.
    """

    order: int
    features: np.ndarray
    target: np.ndarray
    bound: float
    name: str = ""
    origin: str = "moment closeness"

    def residual(self, pe: PseudoExpectation) -> float:
        Y = pe.second_moments
        iu = np.triu_indices(pe.n, 1)
        if pe.degree == 2:
            diff = self.features @ Y[iu] - self.target
            return float(diff @ diff) - self.bound
        c, const = self.degree4_coefficients(pe.n)
        z = _z_from_matrix(pe)
        return float(c @ z + const) - self.bound

    def degree4_coefficients(self, n: int):
        """Coefficients of ``pE ||P_s - M_s||^2`` on the degree-4 moment vector."""
        cache = self.__dict__.setdefault("_d4", {})
        if n not in cache:
            index = _subset_index(n)
            pairs = list(itertools.combinations(range(n), 2))
            G = self.features.T @ self.features
            lin = -2.0 * (self.features.T @ self.target)
            c = np.zeros(len(index))
            cols = np.empty((len(pairs), len(pairs)), dtype=np.int64)
            for a, p in enumerate(pairs):
                for b, q in enumerate(pairs):
                    cols[a, b] = index[tuple(sorted(set(p) | set(q)))]
            np.add.at(c, cols.ravel(), G.ravel())
            for a, p in enumerate(pairs):
                c[index[p]] += lin[a]
            cache[n] = (c, float(self.target @ self.target))
        return cache[n]


@dataclass(frozen=True)
class _Structural:
    """Marker for the constraints every selection satisfies (handled in bulk)."""

    name: str
    origin: str = "subset axioms"


def capped_moment_factor(s: int, d: int, radius: float) -> float:
    """``E|min(|g|, R)|^s / E|g|^s`` for ``g ~ N(0, I_d)``.

    Capping keeps directions, so the capped moment tensor is this factor
    times the Gaussian one.
    """
    if not np.isfinite(radius):
        return 1.0
    full = 2 ** (s / 2) * math.exp(math.lgamma((d + s) / 2) - math.lgamma(d / 2))
    r2 = radius * radius
    return float(stats.chi2.cdf(r2, d + s) + radius**s * stats.chi2.sf(r2, d) / full)


def _pair_features(U: np.ndarray, s: int) -> np.ndarray:
    cache: dict = {(): np.ones(U.shape[0])}

    def prod(prefix):
        if prefix not in cache:
            cache[prefix] = prod(prefix[:-1]) * U[:, prefix[-1]]
        return cache[prefix]

    return np.stack([prod(idx) for idx in multisets(U.shape[1], s)], axis=0)


@dataclass(frozen=True, eq=False)
class AxiomSystem:
    """Constraints on a selection of ``n / k`` rows with near-Gaussian pairwise moments.

    Built by :func:`encode_axioms`; treat as immutable.  The compiled convex
    problem is cached in ``_cache``.
    """

    points: np.ndarray
    k: int
    t: int
    delta: float
    eps: float
    whitening: Whitening
    degree: int
    delta_eff: float
    cap: float
    constraints: tuple
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def size(self) -> float:
        return self.n / self.k

    def with_constraints(self, extra: Iterable[LinearConstraint]) -> "AxiomSystem":
        """Copy with additional linear constraints (fresh solver cache)."""
        return AxiomSystem(
            self.points, self.k, self.t, self.delta, self.eps, self.whitening, self.degree,
            self.delta_eff, self.cap, self.constraints + tuple(extra),
        )

    def moment_constraints(self) -> list:
        return [c for c in self.constraints if isinstance(c, MomentConstraint)]

    def residuals(self, pe: PseudoExpectation) -> dict:
        """Signed residual of every constraint; positive means violated.

        Equalities report absolute deviations, inequalities ``value - bound``.
        """
        if pe.degree != self.degree or pe.n != self.n:
            raise InvalidShape("pseudoexpectation does not match the axiom system")
        n, m = self.n, self.size
        M = pe.moment_matrix
        y, Y = pe.first_moments, pe.second_moments
        out = {
            "psd": -pe.min_eigenvalue(),
            "normalization": abs(M[0, 0] - 1.0),
            "sum": abs(y.sum() - m),
        }
        if self.degree == 2:
            out["booleanity"] = float(np.max(np.abs(np.diag(Y) - y)))
            out["sum_localized"] = float(np.max(np.abs(Y.sum(axis=1) - m * y)))
            out["nonnegativity"] = float(-np.min(M))
            out["dominance"] = float(np.max(Y - y[:, None]))
        else:
            z = _z_from_matrix(pe)
            B = _sum_matrix(n, m)
            out["booleanity"] = _tie_violation(pe)
            out["sum_localized"] = float(np.max(np.abs(B @ z)))
            out["nonnegativity"] = float(-np.min(z))
            out["dominance"] = float(np.max(Y - y[:, None]))
        for c in self.constraints:
            if isinstance(c, _Structural):
                continue
            out[c.name] = c.residual(pe)
        return out

    def check(self, pe: PseudoExpectation, tol: Tolerances = Tolerances()) -> tuple[bool, dict]:
        """Whether ``pe`` satisfies every constraint within ``tol``, with the violations."""
        res = self.residuals(pe)
        eq = tol.eq(self.n)
        bad = {}
        for name, v in res.items():
            if name == "psd":
                limit = tol.tol_psd
            elif name == "normalization":
                limit = 1e-9
            elif name in ("sum", "booleanity", "sum_localized"):
                limit = eq
            elif name in ("nonnegativity", "dominance"):
                limit = eq
            else:
                c = next(c for c in self.constraints if getattr(c, "name", None) == name)
                if isinstance(c, LinearConstraint) and c.sense == "==":
                    limit = eq
                else:
                    limit = tol.tol_ineq * max(1.0, abs(getattr(c, "bound", getattr(c, "rhs", 1.0))))
            if v > limit:
                bad[name] = (float(v), float(limit))
        return not bad, bad

    def dump_debug(self, pe: PseudoExpectation, path) -> None:
        """Write the moment matrix and residuals of ``pe`` as JSON."""
        payload = pe.to_dict()
        payload["axioms"] = {
            "k": self.k, "t": self.t, "delta": self.delta, "eps": self.eps,
            "delta_eff": self.delta_eff, "cap": self.cap, "degree": self.degree,
            "whitening": self.whitening.to_dict(),
        }
        payload["residuals"] = {k: float(v) for k, v in self.residuals(pe).items()}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)


def encode_axioms(
    points: np.ndarray,
    k: int,
    t: int,
    delta: float,
    eps: float,
    W: Optional[Whitening | np.ndarray] = None,
    *,
    degree: int = 2,
    c_corr: float = 10.0,
    cap_quantile: float = 0.95,
    extra: Iterable[LinearConstraint] = (),
) -> AxiomSystem:
    """Encode selection and moment-closeness constraints.

    Parameters
    ----------
    points : ndarray, shape (n, d)
    k : int
        Number of clusters; ``n`` must be divisible by ``k``.
    t : int
        Highest moment order.  Only even orders ``2, 4, ... <= t`` generate
        constraints; ``t < 2`` leaves only the selection constraints.
    delta : float
        Moment tolerance; the bound used is ``delta + c_corr * sqrt(eps)``.
    eps : float
        Corruption fraction.
    W : Whitening or ndarray, optional
        Frame for the pairwise differences.  A bare matrix is taken as
        ``W`` with a zero center; None uses a trimmed global covariance.
    degree : {2, 4}
        Degree 4 is limited to ``n <= 24``.
    c_corr : float
        Corruption slack multiplier.
    cap_quantile : float
        Pairwise differences are capped at radius
        ``sqrt(chi2_d.ppf(cap_quantile))``; use 1.0 to disable capping.
    extra : iterable of LinearConstraint

    Raises
    ------
    InvalidShape
        ``n`` not divisible by ``k``.
    """
    X = np.asarray(points, dtype=float)
    if X.ndim != 2:
        raise InvalidShape("points must be a 2-d array")
    n, d = X.shape
    if k < 1 or n % k:
        raise InvalidShape(f"n = {n} is not divisible by k = {k}")
    if degree not in (2, 4):
        raise InvalidParameter("degree must be 2 or 4")
    if degree == 4 and n > MAX_DEGREE4_N:
        raise InvalidParameter(f"degree 4 supports n <= {MAX_DEGREE4_N}")
    if delta < 0 or not 0 <= eps < 1:
        raise InvalidParameter("need delta >= 0 and 0 <= eps < 1")
    if W is None:
        W = Whitening.from_covariance(*trimmed_covariance(X))
    elif not isinstance(W, Whitening):
        Wm = np.asarray(W, float)
        if Wm.shape != (d, d) or abs(np.linalg.det(Wm)) == 0:
            raise InvalidParameter("whitening must be an invertible d x d matrix")
        W = Whitening(Wm, np.zeros(d), np.linalg.inv(Wm @ Wm.T))

    delta_eff = float(delta + c_corr * math.sqrt(eps))
    cap = float(np.sqrt(stats.chi2.ppf(cap_quantile, d))) if cap_quantile < 1 else float("inf")
    cons: list = [_Structural(name) for name in ("normalization", "booleanity", "sum", "sum_localized", "nonnegativity", "dominance")]

    orders = [s for s in range(2, t + 1, 2)]
    if orders and n > 1:
        iu = np.triu_indices(n, 1)
        U = (X[iu[0]] - X[iu[1]]) @ W.W.T / math.sqrt(2.0)
        if np.isfinite(cap):
            norms = np.linalg.norm(U, axis=1)
            U = U * np.minimum(1.0, cap / np.maximum(norms, 1e-300))[:, None]
        for s in orders:
            scale = np.sqrt(_multiplicities(d, s) / math.factorial(s))
            feats = _pair_features(U, s) * (2.0 * (k / n) ** 2) * scale[:, None]
            target = gaussian_moment_tensor(s, d).values * capped_moment_factor(s, d, cap) * scale
            cons.append(MomentConstraint(s, feats, target, delta_eff, name=f"moment_{s}"))
    cons.extend(extra)
    return AxiomSystem(X, int(k), int(t), float(delta), float(eps), W, degree, delta_eff, cap, tuple(cons))


# ---------------------------------------------------------------------------
# degree-4 bookkeeping

_SUBSETS: dict = {}


def _subset_index(n: int) -> dict:
    """Index of every subset of size <= 4, ordered by size then lexicographically."""
    if n not in _SUBSETS:
        index = {}
        for r in range(5):
            for S in itertools.combinations(range(n), r):
                index[S] = len(index)
        _SUBSETS[n] = index
    return _SUBSETS[n]


def _tie_matrix(n: int) -> sparse.csr_matrix:
    """Sparse map from the subset moment vector to the vectorized (row-major) moment matrix."""
    key = ("tie", n)
    if key not in _SUBSETS:
        basis = _basis(n, 4)
        index = _subset_index(n)
        b = len(basis)
        rows, cols = [], []
        for a, A in enumerate(basis):
            for c, C in enumerate(basis):
                rows.append(a * b + c)
                cols.append(index[tuple(sorted(set(A) | set(C)))])
        _SUBSETS[key] = sparse.csr_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(b * b, len(index))
        )
    return _SUBSETS[key]


def _sum_matrix(n: int, m: float) -> sparse.csr_matrix:
    """Rows ``sum_i z_{S + i} - m z_S`` for every ``|S| <= 3``."""
    key = ("sum", n, m)
    if key not in _SUBSETS:
        index = _subset_index(n)
        rows, cols, vals = [], [], []
        r = 0
        for S, pos in index.items():
            if len(S) > 3:
                continue
            for i in range(n):
                T = tuple(sorted(set(S) | {i}))
                rows.append(r)
                cols.append(index[T])
                vals.append(1.0)
            rows.append(r)
            cols.append(pos)
            vals.append(-m)
            r += 1
        _SUBSETS[key] = sparse.csr_matrix((vals, (rows, cols)), shape=(r, len(index)))
    return _SUBSETS[key]


def _z_from_matrix(pe: PseudoExpectation) -> np.ndarray:
    """Average the tied entries of a degree-4 moment matrix into the subset vector."""
    A = _tie_matrix(pe.n)
    counts = np.asarray(A.sum(axis=0)).ravel()
    return (A.T @ pe.moment_matrix.ravel()) / counts


def _tie_violation(pe: PseudoExpectation) -> float:
    z = _z_from_matrix(pe)
    return float(np.max(np.abs(_tie_matrix(pe.n) @ z - pe.moment_matrix.ravel())))


# ---------------------------------------------------------------------------
# solving


def _linear_expr(poly: Mapping, n: int, degree: int, M, z):
    terms = []
    const = 0.0
    index = _subset_index(n) if degree == 4 else None
    for mono, c in poly.items():
        if len(mono) > 2:
            raise DegreeTooHigh("constraints and objectives are limited to degree 2")
        if len(mono) == 0:
            const += c
        elif degree == 2:
            i = mono[0] + 1
            j = mono[-1] + 1
            terms.append(c * M[0, i] if len(mono) == 1 else c * M[i, j])
        else:
            terms.append(c * z[index[tuple(sorted(set(mono)))]])
    expr = cp.sum(cp.hstack(terms)) if terms else cp.Constant(0.0)
    return expr + const


def _build(ax: AxiomSystem, Q: Optional[np.ndarray] = None):
    """Compile the problem; the linear objective part is a parameter.

    A quadratic part enters as a constant (parameterizing an ``n x n``
    coefficient array makes canonicalization quadratic in memory), so such
    problems are rebuilt per call.
    """
    n, m = ax.n, ax.size
    cons = []
    c = cp.Parameter(n)
    if ax.degree == 2:
        M = cp.Variable((n + 1, n + 1), symmetric=True)
        y, Y = M[0, 1:], M[1:, 1:]
        z = None
        cons += [M >> 0, M[0, 0] == 1, cp.diag(Y) == y, cp.sum(y) == m, cp.sum(Y, axis=1) == m * y, M >= 0]
        # pE w_i w_j <= pE w_i holds for 0/1 selections but does not follow at degree 2
        cons.append(Y <= cp.reshape(y, (n, 1), order="C") @ np.ones((1, n)))
        # explicit fancy indexing: cp.upper_tri mis-orders entries of symmetric variables
        upper = Y[np.triu_indices(n, 1)] if n > 1 else None
        for mc in ax.moment_constraints():
            cons.append(cp.sum_squares(mc.features @ upper - mc.target) <= mc.bound)
        obj = c @ y
        if Q is not None:
            obj = obj + Q[np.triu_indices(n, 1)] @ upper
    else:
        index = _subset_index(n)
        b = len(_basis(n, 4))
        z = cp.Variable(len(index))
        M = cp.Variable((b, b), symmetric=True)
        cons += [M >> 0, cp.vec(M, order="C") == _tie_matrix(n) @ z, z[0] == 1, z >= 0]
        cons.append(_sum_matrix(n, m) @ z == 0)
        for mc in ax.moment_constraints():
            coef, const = mc.degree4_coefficients(n)
            cons.append(coef @ z + const <= mc.bound)
        obj = c @ z[1 : n + 1]
        if Q is not None:
            obj = obj + Q[np.triu_indices(n, 1)] @ z[n + 1 : n + 1 + n * (n - 1) // 2]
    for lc in ax.constraints:
        if isinstance(lc, LinearConstraint):
            e = _linear_expr(lc.poly, n, ax.degree, M, z)
            cons.append(e == lc.rhs if lc.sense == "==" else (e <= lc.rhs if lc.sense == "<=" else e >= lc.rhs))
    return {"M": M, "c": c, "cons": cons, "obj": obj, "problems": {}}


def _objective_arrays(poly: Mapping, n: int):
    c = np.zeros(n)
    Q = np.zeros((n, n))
    const = 0.0
    for mono, v in poly.items():
        if len(mono) == 0:
            const += v
        elif len(mono) == 1:
            c[mono[0]] += v
        elif len(mono) == 2:
            i, j = mono
            if i == j:
                c[i] += v  # booleanity: w_i^2 and w_i agree
            else:
                Q[i, j] += v
        else:
            raise DegreeTooHigh("objective must have degree at most 2")
    return c, Q, const


def _affine_projector(n: int, m: float):
    """Orthogonal projector onto the degree-2 structural equalities.

    Works on symmetric ``(n+1) x (n+1)`` matrices with the Frobenius inner
    product; every constraint is ``<A_r, M> = b_r`` with ``A_r`` symmetric.
    Returns a function mapping ``M`` to its projection.
    """
    size = n + 1
    rows, cols, vals, rhs = [], [], [], []
    r = 0

    def add(entries, b):
        nonlocal r
        for (i, j), v in entries.items():
            rows.append(r)
            cols.append(i * size + j)
            vals.append(v)
        rhs.append(b)
        r += 1

    add({(0, 0): 1.0}, 1.0)
    for i in range(1, size):
        add({(0, i): 0.5, (i, 0): 0.5, (i, i): -1.0}, 0.0)
    add({**{(0, i): 0.5 for i in range(1, size)}, **{(i, 0): 0.5 for i in range(1, size)}}, m)
    for i in range(1, size):
        e = {}
        for j in range(1, size):
            e[(i, j)] = e.get((i, j), 0.0) + 0.5
            e[(j, i)] = e.get((j, i), 0.0) + 0.5
        e[(0, i)] = e.get((0, i), 0.0) - 0.5 * m
        e[(i, 0)] = e.get((i, 0), 0.0) - 0.5 * m
        add(e, 0.0)
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(r, size * size))
    G = (A @ A.T).toarray()
    from scipy.linalg import cho_factor, cho_solve

    fac = cho_factor(G + 1e-14 * np.eye(r))
    b = np.asarray(rhs)

    def project(M):
        x = M.ravel()
        lam = cho_solve(fac, A @ x - b)
        return (x - A.T @ lam).reshape(size, size)

    return project


def _repair(ax: AxiomSystem, M: np.ndarray, rounds: int = 50) -> np.ndarray:
    """Alternate projections onto the equalities, the PSD cone and the entrywise bounds.

    The entrywise step clips ``M`` at zero from below and every
    ``pE w_i w_j`` at ``min(pE w_i, pE w_j)`` from above.

    The last step is always the PSD projection followed by normalization,
    so the result is exactly PSD with ``pE 1 = 1``; the equalities hold up to
    whatever the alternation has not yet removed.
    """
    key = "projector"
    if key not in ax._cache:
        ax._cache[key] = _affine_projector(ax.n, ax.size)
    project = ax._cache[key]
    for _ in range(rounds):
        vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
        if vals[0] >= 0 and M.min() >= 0 and np.all(M[1:, 1:] <= M[0, 1:][:, None]):
            break
        M = (vecs * np.maximum(vals, 0.0)) @ vecs.T
        M = np.maximum(0.5 * (M + M.T), 0.0)
        y = M[0, 1:]
        M[1:, 1:] = np.minimum(M[1:, 1:], np.minimum.outer(y, y))
        M = project(M)
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    if vals[0] < 0:
        M = (vecs * np.maximum(vals, 0.0)) @ vecs.T
    M = 0.5 * (M + M.T)
    return M / M[0, 0]


def _polish(ax: AxiomSystem, M: np.ndarray) -> np.ndarray:
    M = 0.5 * (M + M.T)
    if ax.degree == 2:
        return _repair(ax, M)
    A = _tie_matrix(ax.n)
    counts = np.asarray(A.sum(axis=0)).ravel()
    b = M.shape[0]
    for _ in range(20):
        vals, vecs = np.linalg.eigh(M)
        if vals[0] >= 0:
            break
        M = (vecs * np.maximum(vals, 0.0)) @ vecs.T
        z = (A.T @ M.ravel()) / counts
        M = (A @ z).reshape(b, b)
    return M / M[0, 0]


def solve_feasible(
    ax: AxiomSystem,
    objective: Optional[Mapping] = None,
    sense: str = "max",
    tol: Tolerances = Tolerances(),
    debug_path=None,
) -> PseudoExpectation:
    """Optimize a degree-2 linear functional over the pseudoexpectations satisfying ``ax``.

    Parameters
    ----------
    ax : AxiomSystem
    objective : dict, optional
        Polynomial of degree at most 2 (see :func:`polynomial`); None means
        a pure feasibility problem.
    sense : {'max', 'min'}
    tol : Tolerances
    debug_path : path-like, optional
        When given, the moment matrix and residuals are written there as JSON.

    Returns
    -------
    PseudoExpectation
        Status ``'optimal'`` or ``'optimal_inaccurate'`` (the latter still
        meets every tolerance).

    Raises
    ------
    Infeasible
        The solver certified infeasibility; ``report`` has the solver status.
    SolverStall
        No iterate within tolerance; ``best`` holds the polished last iterate
        when one exists.
    """
    if sense not in ("max", "min"):
        raise InvalidParameter("sense must be 'max' or 'min'")
    poly = _check_poly(objective or {})
    c, Q, const = _objective_arrays(poly, ax.n)
    sign = 1.0 if sense == "max" else -1.0
    if np.any(Q):
        built = _build(ax, sign * (Q + Q.T))
    else:
        if "lin" not in ax._cache:
            ax._cache["lin"] = _build(ax)
        built = ax._cache["lin"]
    built["c"].value = sign * c
    solver_key = (tol.max_iters, tol.solver_eps)
    if solver_key not in built["problems"]:
        built["problems"] = {solver_key: cp.Problem(cp.Maximize(built["obj"]), built["cons"])}
    prob = built["problems"][solver_key]
    try:
        prob.solve(
            solver="SCS", eps_abs=tol.solver_eps, eps_rel=tol.solver_eps,
            max_iters=tol.max_iters, warm_start=True,
        )
    except cp.SolverError as exc:
        raise SolverStall(f"solver failed: {exc}") from exc
    status = prob.status
    if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        raise Infeasible(
            "the constraint system has no pseudoexpectation",
            report={"status": status, "solver": "SCS", "iterations": _iterations(prob)},
        )
    if built["M"].value is None:
        raise SolverStall(f"solver returned status {status!r} without an iterate")
    M = _polish(ax, np.asarray(built["M"].value))
    pe = PseudoExpectation(ax.degree, ax.n, M, status=status)
    value = pe_eval(pe, poly) if poly else 0.0
    res = ax.residuals(pe)
    pe = PseudoExpectation(ax.degree, ax.n, M, res, status, value)
    if debug_path is not None:
        ax.dump_debug(pe, debug_path)
    ok, bad = ax.check(pe, tol)
    if not ok:
        if status == cp.OPTIMAL or status == cp.OPTIMAL_INACCURATE:
            # a converged solve whose polished iterate still misses the bounds
            # means the feasible set is empty up to solver accuracy
            worst = max(bad, key=lambda n: bad[n][0] / max(bad[n][1], 1e-300))
            if bad[worst][0] > 1e3 * bad[worst][1]:
                raise Infeasible(
                    f"constraint {worst!r} violated by {bad[worst][0]:.3g}",
                    report={"status": status, "violations": bad},
                )
        raise SolverStall(f"solver status {status!r}; violations {bad}", best=pe)
    return pe


def _iterations(prob) -> Optional[int]:
    stats_ = prob.solver_stats
    return getattr(stats_, "num_iters", None) if stats_ is not None else None


# ---------------------------------------------------------------------------
# whitening fixed point


def _sq_dists(Z: np.ndarray) -> np.ndarray:
    sq = np.sum(Z * Z, axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * Z @ Z.T
    return np.maximum(D, 0.0)


def _logdet_block(X: np.ndarray, block: np.ndarray) -> float:
    Y = X[block]
    diff = Y - Y.mean(axis=0)
    sign, val = np.linalg.slogdet(diff.T @ diff / len(block))
    return val if sign > 0 else -np.inf


def _c_steps(X: np.ndarray, block: np.ndarray, m: int, steps: int) -> np.ndarray:
    """Concentration steps: re-select the ``m`` rows nearest to the block in its own frame."""
    for _ in range(steps):
        Y = X[block]
        mu = Y.mean(axis=0)
        cov = (Y - mu).T @ (Y - mu) / len(block)
        try:
            wh = Whitening.from_covariance(mu, cov)
        except DegenerateSelection:
            return block
        Z = (X - mu) @ wh.W.T
        new = np.sort(np.argsort(np.sum(Z * Z, axis=1), kind="stable")[:m])
        if np.array_equal(new, block):
            break
        block = new
    return block


def fit_whitening(
    points: np.ndarray,
    k: int,
    *,
    iters: int = 5,
    rtol: float = 1e-6,
    starts: int = 30,
    seed: int = 0,
    eps: float = 0.0,
) -> tuple[Whitening, list]:
    """Find a frame in which some block of ``n / k`` rows looks isotropic.

    Candidate blocks of ``m = n / k`` rows are grown from random
    ``(d + 1)``-subsets and from nearest-neighbour balls, refined by
    concentration steps (keep the ``m`` rows nearest the block in the
    block's own frame) and the block with the smallest covariance
    determinant wins, which makes the choice affine invariant.  With
    ``eps > 0`` the blocks have ``m - ceil(2 eps m)`` rows and their
    covariance is inflated by the Gaussian consistency factor for that
    trimming, so a cluster that lost rows to the adversary still yields a
    clean block.  The final
    loop alternates :func:`update_whitening` on the block's point mass with
    one more concentration step for at most ``iters`` rounds or until ``W``
    moves by less than ``rtol`` relatively.

    Returns
    -------
    (Whitening, history)
        ``history`` lists the relative change of ``W`` per final round.
    """
    X = np.asarray(points, float)
    n, d = X.shape
    if k < 1 or n % k:
        raise InvalidShape(f"n = {n} is not divisible by k = {k}")
    m = n // k - math.ceil(2 * eps * (n // k))
    if m <= d:
        raise DegenerateSelection(f"blocks of {m} rows cannot whiten {d} dimensions")
    frac = m / (n // k)
    consistency = frac / stats.chi2.cdf(stats.chi2.ppf(frac, d), d + 2) if frac < 1 else 1.0
    rng = np.random.default_rng(seed)
    glob = Whitening.from_covariance(*trimmed_covariance(X))
    D = _sq_dists((X - glob.center) @ glob.W.T)
    near = np.argsort(D, axis=1, kind="stable")[:, :m]
    centers = rng.choice(n, size=min(starts, n), replace=False)
    seeds = [np.sort(near[c]) for c in centers]
    for _ in range(starts):
        small = rng.choice(n, size=d + 1, replace=False)
        Y = X[small]
        mu = Y.mean(axis=0)
        cov = (Y - mu).T @ (Y - mu) / len(small) + 1e-9 * np.eye(d) * max(np.trace(glob.covariance) / d, 1e-300)
        wh = Whitening.from_covariance(mu, cov)
        Z = (X - mu) @ wh.W.T
        seeds.append(np.sort(np.argsort(np.sum(Z * Z, axis=1), kind="stable")[:m]))
    best, best_val = None, np.inf
    for block in seeds:
        block = _c_steps(X, block, m, 10)
        val = _logdet_block(X, block)
        if val < best_val:
            best, best_val = block, val
    if best is None:
        raise DegenerateSelection("every candidate block is degenerate")

    wh = glob
    history = []
    block = best
    for _ in range(iters):
        u = np.zeros(n)
        u[block] = 1.0
        new = update_whitening(X, PseudoExpectation.point_mass(u))
        if consistency != 1.0:
            new = Whitening.from_covariance(new.center, consistency * new.covariance)
        change = float(np.linalg.norm(new.W - wh.W) / np.linalg.norm(wh.W))
        history.append(change)
        wh = new
        if change < rtol:
            break
        block = _c_steps(X, block, m, 1)
    return wh, history
