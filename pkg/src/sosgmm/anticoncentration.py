"""Certifiable anti-concentration polynomial for the standard Gaussian.

The polynomial ``q_eps`` is even, a perfect square, at least ``1 - eps`` on
``[-eps, eps]`` and has Gaussian expectation ``O(eps)``.  It is assembled
from three pieces:

* a Jackson-damped Chebyshev approximation ``J`` of a narrow trapezoid
  bump (lifted to ``0.9 * (f + 0.1)`` so that ``J`` stays inside ``(0, 1)``),
* the amplifier ``A_k`` which pushes values near 1 towards 1 and values
  near 0 towards 0,
* rescaling by ``L`` and squaring.

Degrees get very large (millions for ``eps = 0.05``), so all coefficient
work is done with DCTs on Chebyshev grids and every evaluation goes
through a Clenshaw recurrence in the Chebyshev basis.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import chebyshev as npcheb
from numpy.polynomial import polynomial as npmono
from scipy import special
from scipy.fft import dct

from ._kernels import clenshaw, clenshaw_log
from .errors import (
    ApproximationFailed,
    ConstructionFailed,
    InvalidDegree,
    InvalidParameter,
    PreconditionFailed,
    PrecisionWarning,
)

__all__ = [
    "UnivariatePoly",
    "QEpsilonCertificate",
    "jackson_approx",
    "jackson_damping",
    "measured_sup_error",
    "amplifier",
    "growth_check",
    "build_q",
    "gauss_hermite_expectation",
    "hermite_nodes",
    "bump",
]

_SMALL_DEGREE = 64


@dataclass(frozen=True, eq=False)
class UnivariatePoly:
    """A real polynomial in the monomial or Chebyshev basis.

    Parameters
    ----------
    coefficients : array_like
        Lowest degree first.
    basis : {'chebyshev', 'monomial'}
    interval : (float, float)
        For the Chebyshev basis, the interval mapped affinely onto [-1, 1].
    trim : bool
        Drop trailing coefficients below ``1e-14`` times the largest one.
    """

    coefficients: np.ndarray
    basis: str = "chebyshev"
    interval: tuple = (-1.0, 1.0)
    trim: bool = True

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.coefficients, dtype=float)).copy()
        if self.basis not in ("chebyshev", "monomial"):
            raise InvalidParameter(f"unknown basis {self.basis!r}")
        lo, hi = (float(v) for v in self.interval)
        if not hi > lo:
            raise InvalidParameter("interval must satisfy lo < hi")
        if c.size == 0:
            c = np.zeros(1)
        top = np.max(np.abs(c))
        cut = 1e-14 * top if self.trim else 0.0
        last = c.size - 1
        while last > 0 and abs(c[last]) <= cut:
            last -= 1
        c = c[: last + 1]
        c.setflags(write=False)
        object.__setattr__(self, "coefficients", c)
        object.__setattr__(self, "interval", (lo, hi))

    @property
    def degree(self) -> int:
        return self.coefficients.size - 1

    def _to_unit(self, x):
        lo, hi = self.interval
        return (2.0 * np.asarray(x, dtype=float) - (lo + hi)) / (hi - lo)

    def __call__(self, x):
        x_arr = np.asarray(x, dtype=float)
        flat = np.atleast_1d(x_arr).ravel()
        if self.basis == "monomial":
            out = npmono.polyval(flat, self.coefficients)
        else:
            u = np.ascontiguousarray(self._to_unit(flat))
            if self.degree <= _SMALL_DEGREE:
                out = npcheb.chebval(u, self.coefficients)
            else:
                out = clenshaw(np.ascontiguousarray(self.coefficients), u)
        out = np.asarray(out, dtype=float).reshape(x_arr.shape)
        return float(out) if out.ndim == 0 else out

    def log_abs(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Sign and natural log of ``|p(x)|``, finite even where ``p`` overflows."""
        flat = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
        cheb = self if self.basis == "chebyshev" else self.to_chebyshev()
        u = np.ascontiguousarray(cheb._to_unit(flat))
        return clenshaw_log(np.ascontiguousarray(cheb.coefficients), u)

    def to_chebyshev(self) -> "UnivariatePoly":
        if self.basis == "chebyshev":
            return self
        return UnivariatePoly(npcheb.poly2cheb(self.coefficients), "chebyshev", (-1.0, 1.0), self.trim)

    def to_monomial(self) -> "UnivariatePoly":
        """Monomial form in the original variable (only sensible for small degree)."""
        if self.basis == "monomial":
            return self
        lo, hi = self.interval
        mono_u = npcheb.cheb2poly(self.coefficients)
        # substitute u = a x + b
        a, b = 2.0 / (hi - lo), -(lo + hi) / (hi - lo)
        out = np.zeros(1)
        power = np.ones(1)
        for c in mono_u:
            out = npmono.polyadd(out, c * power)
            power = npmono.polymul(power, [b, a])
        return UnivariatePoly(out, "monomial", (-1.0, 1.0), self.trim)

    def to_dict(self) -> dict:
        return {
            "basis": self.basis,
            "interval": list(self.interval),
            "degree": self.degree,
            "coefficients": self.coefficients.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "UnivariatePoly":
        return cls(np.asarray(data["coefficients"], float), data["basis"], tuple(data["interval"]), trim=False)


# ---------------------------------------------------------------------------
# Chebyshev grid helpers


def _values_at_cheb_points(coef: np.ndarray, M: int) -> np.ndarray:
    """Series values at the M first-kind Chebyshev points cos(pi (m + 1/2) / M)."""
    b = np.zeros(M)
    n = min(coef.size, M)
    b[:n] = coef[:n]
    b[1:] *= 0.5
    return dct(b, type=3)


def _coefs_from_cheb_values(values: np.ndarray) -> np.ndarray:
    """Inverse of :func:`_values_at_cheb_points` (interpolating coefficients)."""
    M = values.size
    a = dct(values, type=2) / M
    a[0] *= 0.5
    return a


def _cheb_points(M: int) -> np.ndarray:
    return np.cos(np.pi * (np.arange(M) + 0.5) / M)


def jackson_damping(N: int) -> np.ndarray:
    """Jackson kernel factors g_0..g_N for a degree-N Chebyshev series."""
    j = np.arange(N + 1)
    Np = N + 1
    th = np.pi / Np
    return ((Np - j) * np.cos(j * th) + np.sin(j * th) / np.tan(th)) / Np


def measured_sup_error(p: UnivariatePoly, f: Callable, n_cheb: Optional[int] = None, n_uniform: int = 2001) -> float:
    """Largest ``|p - f|`` on a dense Chebyshev grid plus a uniform grid of [-1, 1]."""
    if n_cheb is None:
        n_cheb = max(8 * (p.degree + 1), 20001)
    xs = _cheb_points(n_cheb)
    vals = _values_at_cheb_points(np.asarray(p.to_chebyshev().coefficients), n_cheb)
    err = np.max(np.abs(vals - np.asarray(f(xs), dtype=float)))
    xu = np.linspace(-1.0, 1.0, n_uniform)
    err = max(err, np.max(np.abs(np.asarray(p(xu)) - np.asarray(f(xu), dtype=float))))
    return float(err)


def _estimate_lipschitz(f: Callable, n: int = 200001) -> float:
    x = np.linspace(-1.0, 1.0, n)
    y = np.asarray(f(x), dtype=float)
    return float(np.max(np.abs(np.diff(y))) / (x[1] - x[0]))


def jackson_approx(f: Callable, degree: int, lipschitz: Optional[float] = None) -> UnivariatePoly:
    """Degree-``degree`` polynomial approximation of ``f`` on [-1, 1].

    The Chebyshev coefficients of ``f`` are sampled with a DCT on a fine
    grid and damped by the Jackson kernel.  If the undamped truncation is
    already exact to 1e-12 (``f`` itself a low-degree polynomial) that
    truncation is returned instead.  The measured sup error is checked
    against ``6 * lipschitz / degree``.

    Raises
    ------
    ApproximationFailed
        If the bound fails at the default and at an 8x finer sampling.
    """
    if degree < 1:
        raise InvalidDegree("degree must be at least 1")
    if lipschitz is None:
        lipschitz = _estimate_lipschitz(f)
    bound = 6.0 * lipschitz / degree
    M = max(16 * (degree + 1), 2**16)
    for attempt in range(2):
        coef = _coefs_from_cheb_values(np.asarray(f(_cheb_points(M)), dtype=float))[: degree + 1]
        plain = UnivariatePoly(coef, trim=False)
        if measured_sup_error(plain, f) <= 1e-12:
            return UnivariatePoly(coef)
        damped = UnivariatePoly(coef * jackson_damping(degree), trim=False)
        err = measured_sup_error(damped, f)
        if err <= bound:
            return damped
        M *= 8
    raise ApproximationFailed(f"sup error {err:.3g} exceeds 6*Lip/degree = {bound:.3g}")


def bump(delta: float) -> Callable:
    """Trapezoid equal to 1 on ``|x| <= delta`` and 0 on ``|x| >= 2 delta``."""

    def f(x):
        x = np.abs(np.asarray(x, dtype=float))
        return np.clip((2.0 * delta - x) / delta, 0.0, 1.0)

    return f


def _lifted_bump_coefficients(delta: float, N: int) -> np.ndarray:
    """Exact Chebyshev coefficients of ``0.9 * (bump(delta) + 0.1)`` up to degree N.

    Computed segment by segment in the angle variable, so no sampling
    error enters; odd coefficients vanish by symmetry and are set to 0.
    """
    j = np.arange(N + 1, dtype=float)

    def i0(t):  # integral of cos(j t) from 0 to t
        out = np.empty_like(j)
        out[0] = t
        out[1:] = np.sin(j[1:] * t) / j[1:]
        return out

    def i1(t):  # integral of cos(t) cos(j t) from 0 to t
        out = np.empty_like(j)
        out[0] = np.sin(t)
        out[1] = 0.5 * (t + 0.5 * np.sin(2 * t))
        jj = j[2:]
        out[2:] = 0.5 * (np.sin((jj - 1) * t) / (jj - 1) + np.sin((jj + 1) * t) / (jj + 1))
        return out

    th = {x: np.arccos(x) for x in (2 * delta, delta, -delta, -2 * delta)}
    # bump = (2 delta - x)/delta on [delta, 2 delta], 1 on [-delta, delta], (2 delta + x)/delta on [-2 delta, -delta]
    a = np.zeros(N + 1)
    a += 2.0 * (i0(th[delta]) - i0(th[2 * delta])) - (i1(th[delta]) - i1(th[2 * delta])) / delta
    a += i0(th[-delta]) - i0(th[delta])
    a += 2.0 * (i0(th[-2 * delta]) - i0(th[-delta])) + (i1(th[-2 * delta]) - i1(th[-delta])) / delta
    a *= 2.0 / np.pi
    a[0] *= 0.5
    a *= 0.9
    a[0] += 0.09
    a[1::2] = 0.0
    return a


# ---------------------------------------------------------------------------
# amplifier


def _exact_amplifier_monomial(k: int) -> list:
    """Exact rational monomial coefficients of A_k."""
    coeffs = [Fraction(0)] * (k + 1)
    # (1+u)^j (1-u)^(k-j) expanded with integer arithmetic
    for jj in range(k // 2, k + 1):
        p = [math.comb(jj, i) for i in range(jj + 1)]
        q = [math.comb(k - jj, i) * (-1) ** i for i in range(k - jj + 1)]
        prod = np.convolve(np.array(p, dtype=object), np.array(q, dtype=object))
        w = math.comb(k, jj)
        for i, c in enumerate(prod):
            coeffs[i] += Fraction(w * int(c), 2**k)
    return coeffs


def _exact_monomial_to_chebyshev(mono: list) -> list:
    n = len(mono) - 1
    cheb = [Fraction(0)] * (n + 1)
    for p, c in enumerate(mono):
        if c == 0:
            continue
        # u^p = 2^(1-p) sum_{i < p/2} C(p, i) T_{p-2i} + 2^-p C(p, p/2) T_0
        for i in range(p // 2 + 1):
            m = p - 2 * i
            if m == 0:
                cheb[0] += c * Fraction(math.comb(p, i), 2**p)
            else:
                cheb[m] += c * Fraction(math.comb(p, i), 2 ** (p - 1))
    return cheb


def amplifier(k: int) -> UnivariatePoly:
    """The amplifying polynomial ``A_k(u) = sum_{j >= k/2} C(k,j) ((1+u)/2)^j ((1-u)/2)^(k-j)``.

    Coefficients are formed exactly in rational arithmetic and rounded once
    into the Chebyshev basis on [-1, 1].

    Examples
    --------
    >>> amplifier(12)(1.0)
    1.0
    """
    if k < 2 or k % 2:
        raise InvalidDegree(f"amplifier degree must be even and >= 2, got {k}")
    cheb = _exact_monomial_to_chebyshev(_exact_amplifier_monomial(k))
    return UnivariatePoly(np.array([float(c) for c in cheb]), trim=False)


def growth_check(p: UnivariatePoly, t: float, grid_points: int = 2001) -> bool:
    """Check ``|p(t)| <= |2t|^deg`` for a polynomial bounded by 1 on [-1, 1].

    Raises
    ------
    PreconditionFailed
        If ``|t| < 1`` or ``p`` exceeds 1 in absolute value on the grid.
    """
    if abs(t) < 1:
        raise PreconditionFailed(f"growth bound needs |t| >= 1, got {t}")
    grid = np.linspace(-1.0, 1.0, grid_points)
    if np.max(np.abs(p(grid))) > 1.0 + 1e-12:
        raise PreconditionFailed("polynomial is not bounded by 1 on [-1, 1]")
    sign, logabs = p.log_abs(np.array([t]))
    if sign[0] == 0:
        return True
    return bool(logabs[0] <= p.degree * math.log(2 * abs(t)) + 1e-12)


# ---------------------------------------------------------------------------
# Gauss-Hermite quadrature


def hermite_nodes(n: int, cutoff: float = 40.0) -> tuple[np.ndarray, np.ndarray]:
    """Probabilists' Gauss-Hermite rule of order ``n``, normalized to a probability.

    For large ``n`` only nodes with ``|x| <= cutoff`` are returned: every
    other weight underflows double precision (below ``exp(-cutoff^2/2)``).
    """
    if n <= 20000:
        x, w = special.roots_hermitenorm(n)
        w = w / np.sqrt(2 * np.pi)
        keep = np.abs(x) <= cutoff
        return x[keep], w[keep]
    try:  # asymptotic construction restricted to the central nodes
        from scipy.special import _orthogonal as _orth

        iv = _orth._initial_nodes(n)
        iv = iv[iv <= cutoff / np.sqrt(2) + 1.0]
        xs, ws = _orth._newton(n, iv)
    except Exception:  # pragma: no cover - fall back to the full rule
        x, w = special.roots_hermitenorm(n)
        w = w / np.sqrt(2 * np.pi)
        keep = np.abs(x) <= cutoff
        return x[keep], w[keep]
    if n % 2 == 0:
        nodes = np.concatenate([-xs[::-1], xs])
        weights = np.concatenate([ws[::-1], ws])
    else:
        nodes = np.concatenate([-xs[:0:-1], xs])
        weights = np.concatenate([ws[:0:-1], ws])
    nodes = nodes * np.sqrt(2)
    weights = weights / weights.sum()
    keep = np.abs(nodes) <= cutoff
    return nodes[keep], weights[keep]


def gauss_hermite_expectation(p: UnivariatePoly, nodes: Optional[int] = None) -> float:
    """``E p(x)`` for ``x ~ N(0, 1)`` by Gauss-Hermite quadrature.

    A rule with ``nodes >= deg/2 + 1`` is exact for ``p``; if fewer are
    requested a :class:`PrecisionWarning` is issued and the count raised.
    """
    need = p.degree // 2 + 1
    if nodes is None:
        nodes = need
    elif nodes < need:
        warnings.warn(f"{nodes} nodes cannot integrate degree {p.degree} exactly; using {need}", PrecisionWarning)
        nodes = need
    x, w = hermite_nodes(nodes)
    return float(np.dot(w, p(x)))


# ---------------------------------------------------------------------------
# q_eps


@dataclass(frozen=True, eq=False)
class QEpsilonCertificate:
    """The anti-concentration polynomial with its measured properties.

    ``poly`` and ``sqrt_poly`` are Chebyshev series on ``[-L, L]``; ``checks``
    records each verified property (measured value, threshold, verdict).
    """

    eps: float
    poly: UnivariatePoly
    sqrt_poly: UnivariatePoly
    L: float
    k_amp: int
    delta: float
    jackson_degree: int
    C: Optional[float]
    C_effective: float
    Cprime: float
    checks: dict
    passed: bool
    elapsed: float
    jackson: UnivariatePoly = field(repr=False, default=None)

    @property
    def degree(self) -> int:
        return self.poly.degree

    def structured_values(self, x) -> np.ndarray:
        """Evaluate ``q`` through its factored form (cheaper and more stable)."""
        return _structured_q(self.jackson, amplifier(self.k_amp), self.L, np.asarray(x, float))

    def to_dict(self, include_coefficients: bool = False) -> dict:
        out = {
            "eps": self.eps,
            "L": self.L,
            "k_amp": self.k_amp,
            "delta": self.delta,
            "jackson_degree": self.jackson_degree,
            "degree": self.degree,
            "sqrt_degree": self.sqrt_poly.degree,
            "C": self.C,
            "C_effective": self.C_effective,
            "Cprime": self.Cprime,
            "checks": self.checks,
            "pass": self.passed,
            "elapsed_seconds": self.elapsed,
        }
        if include_coefficients:
            out["poly"] = self.poly.to_dict()
            out["sqrt_poly"] = self.sqrt_poly.to_dict()
        return out


def _amp_values(amp: UnivariatePoly, v: np.ndarray) -> np.ndarray:
    return npcheb.chebval(v, amp.coefficients)


def _structured_s(jack: UnivariatePoly, amp: UnivariatePoly, L: float, x: np.ndarray) -> np.ndarray:
    u = np.ascontiguousarray(np.atleast_1d(x) / L)
    J = clenshaw(np.ascontiguousarray(jack.coefficients), u)
    return _amp_values(amp, 2.0 * J - 1.0)


def _structured_q(jack, amp, L, x):
    x = np.atleast_1d(np.asarray(x, float))
    # J is even by construction, so s is even and q = s^2
    s = _structured_s(jack, amp, L, np.abs(x))
    return s * s


def _structured_log_s(jack, amp, L, x):
    """log |s(x)| valid also for |x| > L, where the values overflow."""
    u = np.ascontiguousarray(np.atleast_1d(x) / L)
    sj, lj = clenshaw_log(np.ascontiguousarray(jack.coefficients), u)
    out = np.empty_like(lj)
    small = lj < 40.0
    if np.any(small):
        v = 2.0 * sj[small] * np.exp(lj[small]) - 1.0
        out[small] = np.log(np.abs(_amp_values(amp, v)) + 1e-300)
    if np.any(~small):
        mono = npcheb.cheb2poly(amp.coefficients)
        lead = abs(mono[-1])
        out[~small] = np.log(lead) + amp.degree * (np.log(2.0) + lj[~small])
    return out


def _gaussian_tail_bound(log_sup_s: float, D: int, L: float) -> float:
    """Bound on the integral of q * phi over |x| > L.

    Uses the extremal growth of Chebyshev polynomials outside their base
    interval: ``|s(x)| <= sup|s| * exp(D * acosh(|x| / L))``.
    """
    xs = L * (1.0 + np.linspace(0.0, 4.0, 200001))
    logint = 2 * log_sup_s + 2 * D * np.arccosh(xs / L) - 0.5 * xs**2 - 0.5 * np.log(2 * np.pi)
    m = np.max(logint)
    dx = xs[1] - xs[0]
    log_total = m + np.log(np.sum(np.exp(logint - m)) * dx) + np.log(2.0)
    return float(np.exp(log_total)) if log_total > -700 else 0.0


def build_q(
    eps: float,
    C: Optional[float] = None,
    *,
    k_amp: Optional[int] = None,
    jackson_factor: Optional[float] = None,
    max_jackson_degree: Optional[int] = None,
    tail_factor: float = 2.2,
    grid_points: int = 4001,
    focus_points: int = 512,
    square_points: int = 1001,
    mean_bound: float = 50.0,
    raise_on_failure: bool = True,
) -> QEpsilonCertificate:
    """Construct and verify the anti-concentration polynomial ``q_eps``.

    Parameters
    ----------
    eps : float
        Target width, ``0 < eps <= 0.25``.
    C : float, optional
        When given, the scale is ``L = log(1/eps)^C / eps`` and the Jackson
        degree ``jackson_factor * L / eps`` (default factor 100, capped at
        4096).  When omitted (the default) the scale is chosen so the
        Gaussian tail dominates the polynomial growth outside ``[-L, L]``:
        ``L = tail_factor * k * jackson_factor / eps`` with
        ``jackson_factor = 3.2``; the equivalent exponent is recorded as
        ``C_effective``.
    k_amp : int, optional
        Amplifier degree; default ``ceil(6 log(1/eps)) + 1`` rounded up to even.
    raise_on_failure : bool
        Raise :class:`ConstructionFailed` when a property check fails.

    Returns
    -------
    QEpsilonCertificate
    """
    t0 = time.perf_counter()
    if not 0 < eps <= 0.25:
        raise InvalidParameter(f"eps must lie in (0, 0.25], got {eps}")
    if C is not None and C < 1:
        raise InvalidParameter("C must be at least 1")
    log_inv = math.log(1.0 / eps)
    if k_amp is None:
        k_amp = math.ceil(6 * log_inv) + 1
        k_amp += k_amp % 2
    amp = amplifier(k_amp)
    if C is None:
        jf = 3.2 if jackson_factor is None else jackson_factor
        cap = 2**21 if max_jackson_degree is None else max_jackson_degree
        L = tail_factor * k_amp * jf / eps
    else:
        jf = 100.0 if jackson_factor is None else jackson_factor
        cap = 4096 if max_jackson_degree is None else max_jackson_degree
        L = log_inv**C / eps
    delta = eps / L
    N = int(min(math.ceil(jf * L / eps), cap))
    jack_coef = _lifted_bump_coefficients(delta, N) * jackson_damping(N)
    jack_coef[1::2] = 0.0
    jack = UnivariatePoly(jack_coef, trim=False)

    # s = A_k(2J - 1) as a Chebyshev series of degree D = k N on [-L, L]
    D = k_amp * N
    Ms = D + 1
    Jv = _values_at_cheb_points(jack_coef, Ms)
    s_vals = _amp_values(amp, 2.0 * Jv - 1.0)
    del Jv
    s_coef = _coefs_from_cheb_values(s_vals)
    del s_vals
    s_coef[1::2] = 0.0
    Mq = 2 * D + 1
    q_vals = _values_at_cheb_points(s_coef, Mq)
    q_vals *= q_vals
    q_coef = _coefs_from_cheb_values(q_vals)
    del q_vals
    q_coef[1::2] = 0.0
    sqrt_poly = UnivariatePoly(s_coef, "chebyshev", (-L, L), trim=False)
    poly = UnivariatePoly(q_coef, "chebyshev", (-L, L), trim=False)

    checks = {}
    # verification grids
    grid = np.linspace(-2 * L, 2 * L, grid_points)
    focus = np.linspace(-3 * eps, 3 * eps, focus_points)
    inside = grid[np.abs(grid) <= L]
    q_grid = _structured_q(jack, amp, L, inside)
    q_focus = _structured_q(jack, amp, L, focus)

    # 1. evenness, measured on the coefficient form
    sq_grid = np.linspace(-2 * L, 2 * L, square_points)
    sq_in = sq_grid[np.abs(sq_grid) <= L]
    half = sq_in[sq_in >= 0]
    pos = poly(half)
    neg = poly(-half)
    scale = max(1.0, float(np.max(np.abs(pos))))
    even_dev = float(np.max(np.abs(pos - neg)))
    checks["even"] = {"value": even_dev, "threshold": 1e-10 * scale, "passed": even_dev <= 1e-10 * scale}

    # 2. square witness on the representable part of the grid
    sq_p = poly(sq_in)
    sq_s = sqrt_poly(sq_in)
    dev = np.abs(sq_p - sq_s**2) / np.maximum(1.0, np.abs(sq_p))
    sq_dev = float(np.max(dev))
    struct_dev = float(np.max(np.abs(sq_p - _structured_q(jack, amp, L, sq_in))))
    checks["square"] = {
        "value": sq_dev,
        "threshold": 1e-8,
        "points_checked": int(sq_in.size),
        "points_beyond_L": int(sq_grid.size - sq_in.size),
        "structured_agreement": struct_dev,
        "passed": sq_dev <= 1e-8,
    }

    # 3. q(x) >= 1 - eps on [-eps, eps]
    at_eps = poly(np.array([-eps, eps]))
    near = q_focus[np.abs(focus) <= eps]
    near_min = float(min(np.min(at_eps), np.min(near)))
    checks["near_zero"] = {
        "value": near_min,
        "q_at_minus_eps": float(at_eps[0]),
        "q_at_plus_eps": float(at_eps[1]),
        "threshold": 1.0 - eps,
        "passed": near_min >= 1.0 - eps,
    }

    # 4. Gaussian expectation by an exact Gauss-Hermite rule
    n_nodes = poly.degree // 2 + 1
    xs, ws = hermite_nodes(n_nodes)
    pos_nodes = xs >= 0
    xp = xs[pos_nodes]
    qp = _structured_q(jack, amp, L, xp)
    # q is even: fold the negative nodes onto the positive ones
    wfold = ws[pos_nodes] * np.where(xp > 0, 2.0, 1.0)
    gh = float(np.dot(wfold, qp))
    log_sup_s = float(np.log(max(np.max(np.abs(np.sqrt(q_grid))), 1e-300)))
    tail = _gaussian_tail_bound(log_sup_s, D, L)
    total = gh + tail
    checks["gaussian_mean"] = {
        "value": gh,
        "tail_bound": tail,
        "ratio_to_eps": total / eps,
        "threshold": mean_bound * eps,
        "nodes": int(n_nodes),
        "passed": total <= mean_bound * eps,
    }

    # extra: q in [0, eps] for 2 eps <= |x| <= L, and the empirical growth exponent
    band = (np.abs(inside) >= 2 * eps)
    band_vals = np.concatenate([q_grid[band], q_focus[np.abs(focus) >= 2 * eps]])
    checks["tail"] = {
        "value": float(np.max(band_vals)),
        "min": float(np.min(band_vals)),
        "threshold": eps,
        "passed": bool(np.max(band_vals) <= eps and np.min(band_vals) >= 0.0),
    }
    outside = grid[np.abs(grid) > L * (1 + 1e-9)]
    if outside.size:
        log_q = 2.0 * _structured_log_s(jack, amp, L, np.abs(outside))
        with np.errstate(divide="ignore"):
            expo = log_q / np.log(2.0 * np.abs(outside))
        checks["growth"] = {"empirical_exponent": float(np.max(expo)), "degree": int(poly.degree)}

    passed = all(c.get("passed", True) for c in checks.values())
    deg = poly.degree
    loglog = math.log(log_inv)
    c_eff = math.log(eps * L) / loglog if loglog > 0 else float("nan")
    cprime = math.log(deg * eps**2) / loglog if loglog > 0 else float("nan")
    cert = QEpsilonCertificate(
        eps=eps,
        poly=poly,
        sqrt_poly=sqrt_poly,
        L=float(L),
        k_amp=k_amp,
        delta=float(delta),
        jackson_degree=N,
        C=C,
        C_effective=c_eff,
        Cprime=cprime,
        checks=checks,
        passed=passed,
        elapsed=time.perf_counter() - t0,
        jackson=jack,
    )
    if not passed and raise_on_failure:
        failing = [name for name, c in checks.items() if not c.get("passed", True)]
        raise ConstructionFailed(f"q_eps properties failed: {', '.join(failing)}", certificate=cert)
    return cert
