"""Gaussian and mixture parameter types, sampling and contamination.

The types here are immutable: array fields are copied and flagged
read-only at construction.  Sampling follows one documented transform so
that results are reproducible bit for bit::

    Z = default_rng(seed).standard_normal((n, d))
    X = Z @ A.T + mean

where ``A`` is the (possibly ridged) Cholesky factor of the covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .errors import InvalidParameter, InvalidSampleCount, SingularCovariance

__all__ = [
    "GaussianParams",
    "MixtureModel",
    "SampleSet",
    "ADVERSARIES",
    "cholesky_factor",
    "log_density",
    "log_density_batch",
    "sample_gaussian",
    "sample_mixture",
    "corrupt",
]

ADVERSARIES = ("far-cluster", "mean-shift", "random-noise")


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


def cholesky_factor(cov: np.ndarray, ridge: bool = True) -> np.ndarray:
    """Lower Cholesky factor of ``cov``.

    When the factorization fails and ``ridge`` is set, ``lam * I`` with
    ``lam = 1e-10 * trace / d`` is added (repeatedly scaled by ten, up to a
    few times) before giving up.
    """
    cov = np.asarray(cov, dtype=float)
    try:
        return linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        if not ridge:
            raise SingularCovariance("covariance is not positive definite")
    d = cov.shape[0]
    lam = 1e-10 * max(np.trace(cov), 0.0) / d
    if lam <= 0:
        lam = 1e-12
    for _ in range(6):
        try:
            return linalg.cholesky(cov + lam * np.eye(d), lower=True)
        except linalg.LinAlgError:
            lam *= 10.0
    raise SingularCovariance("covariance is not positive definite even after ridge")


@dataclass(frozen=True, eq=False)
class GaussianParams:
    """Mean and covariance of a d-dimensional Gaussian.

    Parameters
    ----------
    mean : array_like, shape (d,)
    covariance : array_like, shape (d, d)
        Symmetric positive definite.  A small asymmetry (relative 1e-12) is
        symmetrized away; anything larger is rejected.
    ridge : float, optional
        Added to the diagonal before the positive-definiteness check.
    """

    mean: np.ndarray
    covariance: np.ndarray
    ridge: float = 0.0

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        d = mean.shape[0]
        if mean.ndim != 1 or cov.shape != (d, d):
            raise InvalidParameter(f"shape mismatch: mean {mean.shape}, covariance {cov.shape}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise InvalidParameter("non-finite Gaussian parameters")
        scale = max(np.max(np.abs(cov)), 1e-300)
        if np.max(np.abs(cov - cov.T)) > 1e-12 * scale:
            raise InvalidParameter("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        if self.ridge:
            cov = cov + self.ridge * np.eye(d)
        if np.linalg.eigvalsh(cov)[0] <= 0:
            raise SingularCovariance("covariance is not positive definite")
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "covariance", _frozen(cov))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def __eq__(self, other):
        if not isinstance(other, GaussianParams):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(
            self.covariance, other.covariance
        )

    def affine(self, A: np.ndarray, b: np.ndarray) -> "GaussianParams":
        """Law of ``A x + b`` when ``x`` follows this Gaussian."""
        A = np.asarray(A, dtype=float)
        cov = A @ self.covariance @ A.T
        return GaussianParams(A @ self.mean + b, 0.5 * (cov + cov.T))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "covariance": self.covariance.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianParams":
        return cls(np.asarray(data["mean"], float), np.asarray(data["covariance"], float))


@dataclass(frozen=True, eq=False)
class MixtureModel:
    """A finite mixture of Gaussians with nonnegative weights summing to one."""

    components: tuple
    weights: np.ndarray

    def __post_init__(self):
        comps = tuple(self.components)
        w = np.asarray(self.weights, dtype=float)
        if len(comps) < 1:
            raise InvalidParameter("a mixture needs at least one component")
        if w.shape != (len(comps),):
            raise InvalidParameter("one weight per component is required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise InvalidParameter("weights must be nonnegative and sum to 1")
        dims = {c.dim for c in comps}
        if len(dims) != 1:
            raise InvalidParameter("components have different dimensions")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", _frozen(w))

    @classmethod
    def uniform(cls, components: Sequence[GaussianParams]) -> "MixtureModel":
        k = len(components)
        return cls(tuple(components), np.full(k, 1.0 / k))

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def __eq__(self, other):
        if not isinstance(other, MixtureModel):
            return NotImplemented
        return (
            self.k == other.k
            and np.array_equal(self.weights, other.weights)
            and all(a == b for a, b in zip(self.components, other.components))
        )

    def mean(self) -> np.ndarray:
        return sum(w * c.mean for w, c in zip(self.weights, self.components))

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        out = np.zeros((self.dim, self.dim))
        for w, c in zip(self.weights, self.components):
            diff = c.mean - mu
            out += w * (c.covariance + np.outer(diff, diff))
        return out

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "components": [c.to_dict() for c in self.components],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MixtureModel":
        return cls(
            tuple(GaussianParams.from_dict(c) for c in data["components"]),
            np.asarray(data["weights"], float),
        )


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Samples with optional ground truth.

    Attributes
    ----------
    points : ndarray, shape (n, d)
    labels : ndarray of int or None
        Ground-truth component index of every row (corrupted rows keep the
        label of the clean point they replaced).
    corrupted : ndarray of bool or None
        True where the adversary replaced the row.
    seed : int
    eps : float
        Declared corruption fraction.
    adversary : str or None
    """

    points: np.ndarray
    labels: Optional[np.ndarray] = None
    corrupted: Optional[np.ndarray] = None
    seed: int = 0
    eps: float = 0.0
    adversary: Optional[str] = None

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        n = pts.shape[0]
        object.__setattr__(self, "points", _frozen(pts))
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != (n,) or np.any(lab < 0):
                raise InvalidParameter("labels must be a nonnegative vector of length n")
            lab = lab.astype(np.int64).copy()
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)
        if self.corrupted is not None:
            cor = np.asarray(self.corrupted, dtype=bool).copy()
            if cor.shape != (n,):
                raise InvalidParameter("corrupted mask must have length n")
            if cor.sum() > int(np.floor(self.eps * n + 1e-9)):
                raise InvalidParameter("more rows flagged corrupted than eps allows")
            cor.setflags(write=False)
            object.__setattr__(self, "corrupted", cor)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def clean_mask(self) -> np.ndarray:
        if self.corrupted is None:
            return np.ones(self.n, dtype=bool)
        return ~self.corrupted

    def __eq__(self, other):
        if not isinstance(other, SampleSet):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(a, b)

        return (
            np.array_equal(self.points, other.points)
            and same(self.labels, other.labels)
            and same(self.corrupted, other.corrupted)
            and self.seed == other.seed
            and self.eps == other.eps
            and self.adversary == other.adversary
        )


def log_density(g: GaussianParams, x) -> float:
    """Log of the normal density of ``g`` at the single point ``x``.

    Examples
    --------
    >>> round(log_density(GaussianParams([0.0], [[1.0]]), [0.0]), 4)
    -0.9189
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (g.dim,):
        raise InvalidParameter(f"point has dimension {x.shape}, expected ({g.dim},)")
    return float(log_density_batch(g, x[None, :])[0])


def log_density_batch(g: GaussianParams, X: np.ndarray) -> np.ndarray:
    """Vectorized :func:`log_density` over the rows of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    try:
        L = linalg.cholesky(g.covariance, lower=True)
    except linalg.LinAlgError as exc:  # pragma: no cover - guarded by the type
        raise SingularCovariance(str(exc)) from exc
    z = linalg.solve_triangular(L, (X - g.mean).T, lower=True)
    maha = np.einsum("ij,ij->j", z, z)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return -0.5 * (g.dim * np.log(2 * np.pi) + logdet + maha)


def sample_gaussian(g: GaussianParams, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` samples of ``g`` with the documented transform."""
    z = np.random.default_rng(seed).standard_normal((n, g.dim))
    return z @ cholesky_factor(g.covariance).T + g.mean


def sample_mixture(m: MixtureModel, n: int, seed: int, stratified: bool = True) -> SampleSet:
    """Sample ``n`` labelled points from a mixture.

    In stratified mode component ``i`` contributes exactly ``n * weights[i]``
    points, which must be an integer.  Otherwise labels are drawn i.i.d.
    from the weights.  The rows come out in a uniformly random order.
    """
    if n < m.k:
        raise InvalidSampleCount(f"need n >= k, got n={n}, k={m.k}")
    rng = np.random.default_rng(seed)
    if stratified:
        counts = n * m.weights
        rounded = np.rint(counts).astype(int)
        if np.any(np.abs(counts - rounded) > 1e-9) or rounded.sum() != n:
            raise InvalidSampleCount(f"n={n} is not split exactly by the weights {m.weights.tolist()}")
        labels = rng.permutation(np.repeat(np.arange(m.k), rounded))
    else:
        labels = rng.choice(m.k, size=n, p=m.weights)
    z = rng.standard_normal((n, m.dim))
    X = np.empty_like(z)
    for i, comp in enumerate(m.components):
        rows = labels == i
        X[rows] = z[rows] @ cholesky_factor(comp.covariance).T + comp.mean
    return SampleSet(X, labels=labels, corrupted=np.zeros(n, dtype=bool), seed=seed)


def _adversary_points(
    X: np.ndarray, labels: Optional[np.ndarray], count: int, adversary: str, distance: float, rng
) -> np.ndarray:
    d = X.shape[1]
    center = X.mean(axis=0)
    if adversary == "far-cluster":
        u = rng.standard_normal(d)
        u /= np.linalg.norm(u)
        spread = 1e-3 * np.sqrt(max(np.trace(np.cov(X, rowvar=False).reshape(d, d)) / d, 1e-12))
        return center + distance * u + spread * rng.standard_normal((count, d))
    if adversary == "mean-shift":
        # push points along the top covariance direction of the largest component
        if labels is not None:
            big = np.bincount(labels).argmax()
            ref = X[labels == big]
        else:
            ref = X
        mu = ref.mean(axis=0)
        cov = np.cov(ref, rowvar=False).reshape(d, d)
        vals, vecs = np.linalg.eigh(cov)
        v, sd = vecs[:, -1], np.sqrt(max(vals[-1], 1e-12))
        return mu + 3.0 * sd * v + 0.1 * sd * rng.standard_normal((count, d))
    if adversary == "random-noise":
        lo, hi = X.min(axis=0), X.max(axis=0)
        width = np.maximum(hi - lo, 1e-12)
        return rng.uniform(lo - width, hi + width, size=(count, d))
    raise InvalidParameter(f"unknown adversary {adversary!r}; choose from {ADVERSARIES}")


def corrupt(
    s: SampleSet, eps: float, adversary: str = "far-cluster", seed: int = 0, distance: float = 1e3
) -> SampleSet:
    """Replace ``floor(eps * n)`` rows and shuffle, as a strong-contamination adversary.

    Parameters
    ----------
    s : SampleSet
        Clean samples.
    eps : float
        Fraction in ``[0, 1)``.
    adversary : {'far-cluster', 'mean-shift', 'random-noise'}
        Which documented strategy generates the replacement rows.
    seed : int
        Controls which rows are replaced, the replacements and the final
        uniformly random row permutation.
    distance : float
        Offset of the spurious cluster for ``'far-cluster'``.
    """
    if not 0 <= eps < 1:
        raise InvalidParameter(f"eps must lie in [0, 1), got {eps}")
    if adversary not in ADVERSARIES:
        raise InvalidParameter(f"unknown adversary {adversary!r}; choose from {ADVERSARIES}")
    rng = np.random.default_rng(seed)
    n = s.n
    count = int(np.floor(eps * n + 1e-9))
    X = np.array(s.points, copy=True)
    mask = np.zeros(n, dtype=bool)
    if count:
        rows = rng.choice(n, size=count, replace=False)
        X[rows] = _adversary_points(s.points, s.labels, count, adversary, distance, rng)
        mask[rows] = True
    perm = rng.permutation(n)
    labels = None if s.labels is None else s.labels[perm]
    return SampleSet(
        X[perm], labels=labels, corrupted=mask[perm], seed=seed, eps=eps, adversary=adversary
    )
