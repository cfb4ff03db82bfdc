"""Outlier-robust estimation of a single Gaussian by spectral filtering.

The filter keeps an active set of rows.  Each round compares the active
set's covariance with a robust reference covariance; when the largest
relative eigenvalue leaves ``[1 - tau, 1 + tau]`` with
``tau = c_f * eps * log(1 / eps)``, rows whose squared projection on the
offending eigenvector exceeds a randomized threshold are dropped.  At most
``ceil(2 * eps * n)`` rows are ever removed.

This lives below :mod:`sosgmm.sos` in the import graph because the
relaxation needs a robust starting frame as well.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import BudgetExhausted, InvalidParameter, InvalidSampleCount
from .gaussians import GaussianParams

__all__ = ["FilterReport", "robust_gaussian", "robust_gaussian_with_report", "trimmed_covariance"]


@dataclass
class FilterReport:
    """What the filter did.

    Attributes
    ----------
    removed : ndarray of int
        Original row indices dropped, in removal order.
    iterations : int
    top_eigenvalues : list of float
        Largest relative eigenvalue seen at the start of every round.
    tau : float
        Spectral tolerance used.
    budget : int
        Maximum number of removals.
    passed : bool
        True when the final active set passes the spectral test.
    ridge : float
        Diagonal ridge added to the returned covariance (0 when none).
    """

    removed: np.ndarray
    iterations: int
    top_eigenvalues: list = field(default_factory=list)
    tau: float = float("inf")
    budget: int = 0
    passed: bool = True
    ridge: float = 0.0

    def to_dict(self) -> dict:
        return {
            "removed": self.removed.tolist(),
            "iterations": self.iterations,
            "top_eigenvalues": [float(v) for v in self.top_eigenvalues],
            "tau": self.tau,
            "budget": self.budget,
            "passed": self.passed,
            "ridge": self.ridge,
        }


def _ridged(mean: np.ndarray, cov: np.ndarray, scale_hint: float) -> tuple[GaussianParams, float]:
    d = cov.shape[0]
    cov = 0.5 * (cov + cov.T)
    lo = np.linalg.eigvalsh(cov)[0] if d else 1.0
    tr = float(np.trace(cov))
    if lo > 1e-12 * max(tr / d, 1e-300):
        return GaussianParams(mean, cov), 0.0
    lam = 1e-10 * tr / d if tr > 0 else 1e-10 * max(scale_hint, 1.0) ** 2
    while np.linalg.eigvalsh(cov + lam * np.eye(d))[0] <= 0:
        lam *= 10.0
    return GaussianParams(mean, cov + lam * np.eye(d)), lam


def _inv_sqrt(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    floor = 1e-12 * max(vals[-1], 1e-300)
    vals = np.maximum(vals, floor)
    return (vecs / np.sqrt(vals)) @ vecs.T


def _robust_reference(X: np.ndarray, steps: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the Mahalanobis-central half, rescaled to be consistent.

    Starts from the coordinatewise median and MAD, then alternates between
    keeping the half of the rows with the smallest Mahalanobis distance and
    re-estimating.  The truncated covariance is inflated so that a clean
    Gaussian gets its own covariance back.
    """
    n, d = X.shape
    mu = np.median(X, axis=0)
    mad = 1.4826 * np.median(np.abs(X - mu), axis=0)
    mad = np.where(mad > 0, mad, max(float(np.max(mad)), 1e-12))
    cov = np.diag(mad**2)
    h = max((n + d + 1) // 2, d + 1)
    # variance of N(0, I_d) restricted to its central half, per coordinate
    q = stats.chi2.ppf(h / n, d)
    consistency = (h / n) / stats.chi2.cdf(q, d + 2)
    for _ in range(steps):
        P = _inv_sqrt(cov)
        dist = np.sum(((X - mu) @ P) ** 2, axis=1)
        keep = np.argsort(dist, kind="stable")[:h]
        mu = X[keep].mean(axis=0)
        diff = X[keep] - mu
        cov = consistency * diff.T @ diff / h
        if np.trace(cov) <= 0:
            break
    return mu, cov


def trimmed_covariance(points: np.ndarray, factor: float = 10.0) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance after dropping rows far beyond the typical radius.

    A row is dropped when its distance to the coordinatewise median exceeds
    ``factor`` times the median distance.  Unlike :func:`robust_gaussian`
    this makes no Gaussian assumption, so it is a safe global frame for a
    whole mixture.
    """
    X = np.asarray(points, dtype=float)
    med = np.median(X, axis=0)
    r = np.linalg.norm(X - med, axis=1)
    scale = np.median(r)
    keep = r <= factor * scale if scale > 0 else np.ones(len(X), bool)
    Y = X[keep]
    mu = Y.mean(axis=0)
    diff = Y - mu
    return mu, diff.T @ diff / len(Y)


def robust_gaussian_with_report(
    points: np.ndarray,
    eps: float,
    *,
    c_f: float = 10.0,
    seed: int = 0,
    max_iter: int = 200,
    quantile: float = 0.99,
) -> tuple[GaussianParams, FilterReport]:
    """Robust mean and covariance together with a :class:`FilterReport`.

    See :func:`robust_gaussian` for the parameters.
    """
    X = np.asarray(points, dtype=float)
    if X.ndim != 2:
        raise InvalidParameter("points must be a 2-d array")
    n, d = X.shape
    if not 0 <= eps <= 0.2:
        raise InvalidParameter(f"eps must lie in [0, 0.2], got {eps}")
    if n < 10 * d:
        raise InvalidSampleCount(f"need n >= 10 d = {10 * d}, got {n}")
    scale_hint = float(np.max(np.abs(X))) if X.size else 1.0

    if eps == 0:
        mu = X.mean(axis=0)
        diff = X - mu
        g, lam = _ridged(mu, diff.T @ diff / n, scale_hint)
        return g, FilterReport(np.zeros(0, int), 0, [], float("inf"), 0, True, lam)

    tau = c_f * eps * math.log(1.0 / eps)
    budget = math.ceil(2 * eps * n)
    ref_mu, ref_cov = _robust_reference(X)
    if np.trace(ref_cov) <= 0:
        # more than half of the rows coincide: nothing to whiten against
        g, lam = _ridged(ref_mu, ref_cov, scale_hint)
        return g, FilterReport(np.zeros(0, int), 0, [], tau, budget, True, lam)
    P = _inv_sqrt(ref_cov)
    cut = stats.chi2.ppf(quantile, 1)
    rng = np.random.default_rng(seed)

    active = np.ones(n, dtype=bool)
    removed: list[int] = []
    tops: list[float] = []
    passed = False
    it = 0
    for it in range(1, max_iter + 1):
        Z = (X[active] - X[active].mean(axis=0)) @ P
        S = Z.T @ Z / Z.shape[0]
        vals, vecs = np.linalg.eigh(S)
        top = float(vals[-1])
        tops.append(top)
        if abs(top - 1.0) <= tau and abs(vals[0] - 1.0) <= tau:
            passed = True
            break
        if top - 1.0 <= tau:
            # only the smallest eigenvalue is off: removing rows cannot help
            break
        room = budget - len(removed)
        if room <= 0:
            break
        # score against the robust center: the active mean is dragged by the outliers
        score = (((X[active] - ref_mu) @ P) @ vecs[:, -1]) ** 2
        threshold = cut * (1.0 + rng.uniform())
        over = np.flatnonzero(score > threshold)
        if over.size == 0:
            over = np.array([int(np.argmax(score))])
        # largest scores first so a truncated batch drops the worst rows
        over = over[np.argsort(-score[over], kind="stable")][:room]
        idx = np.flatnonzero(active)[over]
        active[idx] = False
        removed.extend(int(i) for i in idx)

    if not passed:
        warnings.warn(
            f"filter stopped after {len(removed)} removals without passing the spectral test",
            BudgetExhausted,
            stacklevel=2,
        )
    Y = X[active]
    mu = Y.mean(axis=0)
    diff = Y - mu
    g, lam = _ridged(mu, diff.T @ diff / len(Y), scale_hint)
    return g, FilterReport(np.asarray(removed, int), it, tops, tau, budget, passed, lam)


def robust_gaussian(
    points: np.ndarray,
    eps: float,
    *,
    c_f: float = 10.0,
    seed: int = 0,
    max_iter: int = 200,
    quantile: float = 0.99,
) -> GaussianParams:
    """Estimate a Gaussian from samples with an ``eps`` fraction of outliers.

    Parameters
    ----------
    points : ndarray, shape (n, d)
        Requires ``n >= 10 d``.
    eps : float
        Contamination level in ``[0, 0.2]``.  With ``eps = 0`` the plain
        empirical mean and ``1/n`` covariance are returned.
    c_f : float
        Constant in the spectral tolerance ``c_f * eps * log(1/eps)``.
    seed : int
        Seeds the randomized removal thresholds.
    max_iter : int
        Maximum number of filter rounds.
    quantile : float
        Removal threshold base: rows whose squared projection exceeds
        ``chi2_1(quantile) * (1 + U)`` with ``U ~ Uniform(0, 1)`` are removed.

    Returns
    -------
    GaussianParams
        Identical rows give a point mass plus a tiny diagonal ridge.

    Warns
    -----
    BudgetExhausted
        The removal budget ran out before the spectral test passed; the
        estimate from the remaining rows is still returned.
    """
    return robust_gaussian_with_report(
        points, eps, c_f=c_f, seed=seed, max_iter=max_iter, quantile=quantile
    )[0]
