"""
Numerical kernel shared by the design, simulation and estimation modules.

Normal distribution functions, Gaussian quadrature rules, adaptive integration,
bracketed root finding, quasi-Newton minimisation with numeric derivatives and
counter-based random streams.
"""

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Literal, NamedTuple, Optional, Tuple

import numpy as np
import structlog
from numpy.polynomial.hermite import hermgauss
from numpy.polynomial.legendre import leggauss
from scipy import integrate as sp_integrate
from scipy import optimize as sp_optimize
from scipy import special

from enrichment.errors import (
    AccuracyError,
    BracketError,
    DerivativeError,
    DomainError,
)

log = structlog.get_logger(__name__)

_EPS = np.finfo(float).eps


def std_normal(x):
    """Return (pdf, cdf) of the standard normal at x (scalar or array)."""
    x = np.asarray(x, dtype=float)
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    cdf = special.ndtr(x)
    if pdf.ndim == 0:
        return float(pdf), float(cdf)
    return pdf, cdf


def norm_pdf(x):
    return np.exp(-0.5 * np.square(x)) / math.sqrt(2.0 * math.pi)


def norm_cdf(x):
    return special.ndtr(x)


def norm_sf(x):
    """Upper tail 1 - Phi(x), accurate far into the tail."""
    return special.ndtr(-np.asarray(x, dtype=float))


def std_normal_quantile(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise DomainError(f"Normal quantile requires 0 < p < 1, got {p!r}")
    return float(special.ndtri(p))


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray
    kind: Literal["legendre", "hermite"]

    def __post_init__(self):
        if self.nodes.shape != self.weights.shape:
            raise ValueError("nodes and weights must have the same shape")
        if np.any(np.diff(self.nodes) <= 0):
            raise ValueError("quadrature nodes must be strictly increasing")
        if np.any(self.weights <= 0):
            raise ValueError("quadrature weights must be positive")

    def integrate(self, f: Callable[[np.ndarray], np.ndarray], a: float = -1.0, b: float = 1.0) -> float:
        """
        Apply the rule to a vectorised integrand.

        Legendre rules are mapped from [-1, 1] onto [a, b]; Hermite rules integrate
        f(x) e^{-x^2} over the real line and ignore the limits.
        """
        if self.kind == "hermite":
            return float(np.dot(self.weights, f(self.nodes)))
        half = 0.5 * (b - a)
        x = 0.5 * (a + b) + half * self.nodes
        return float(half * np.dot(self.weights, f(x)))

    def expectation(self, f: Callable[[np.ndarray], np.ndarray], mean: float = 0.0, sd: float = 1.0) -> float:
        """E[f(X)] for X ~ N(mean, sd^2) with a Hermite rule."""
        if self.kind != "hermite":
            raise ValueError("expectation() requires a Hermite rule")
        x = mean + math.sqrt(2.0) * sd * self.nodes
        return float(np.dot(self.weights, f(x)) / math.sqrt(math.pi))


def gauss_hermite(n: int) -> QuadratureRule:
    if not 1 <= n <= 100:
        raise DomainError(f"Gauss-Hermite order must be in [1, 100], got {n}")
    nodes, weights = hermgauss(n)
    return QuadratureRule(np.asarray(nodes, dtype=float), np.asarray(weights, dtype=float), "hermite")


def gauss_legendre(n: int) -> QuadratureRule:
    if not 1 <= n <= 200:
        raise DomainError(f"Gauss-Legendre order must be in [1, 200], got {n}")
    nodes, weights = leggauss(n)
    return QuadratureRule(np.asarray(nodes, dtype=float), np.asarray(weights, dtype=float), "legendre")


def gaussian_grid(mean: np.ndarray, cov: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Product Gauss-Hermite grid for a bivariate normal.

    Returns points of shape (n*n, 2) and weights of shape (n*n,) summing to one,
    so that sum(w * f(points)) approximates E[f(b)] for b ~ N(mean, cov).
    """
    rule = gauss_hermite(n)
    x, y = np.meshgrid(rule.nodes, rule.nodes, indexing="ij")
    std = math.sqrt(2.0) * np.column_stack([x.ravel(), y.ravel()])
    w = np.outer(rule.weights, rule.weights).ravel() / math.pi
    chol = _psd_cholesky(np.asarray(cov, dtype=float))
    points = np.asarray(mean, dtype=float) + std @ chol.T
    return points, w


def _psd_cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        return vecs @ np.diag(np.sqrt(np.clip(vals, 0.0, None)))


def integrate(f: Callable[[float], float], lower: float, upper: float, tol: float = 1e-9) -> float:
    """
    Adaptive integral of a scalar function; infinite limits are allowed.

    Raises AccuracyError (carrying the best estimate) when the adaptive
    refinement reports that the requested tolerance was not reached.
    """
    if lower == upper:
        return 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sp_integrate.IntegrationWarning)
        out = sp_integrate.quad(f, lower, upper, epsabs=tol, epsrel=tol, limit=200, full_output=1)
    value, abserr = out[0], out[1]
    if len(out) > 3 and abserr > max(tol, tol * abs(value)):
        raise AccuracyError(f"quadrature did not converge: {out[3]}", estimate=value)
    return float(value)


def find_root(f: Callable[[float], float], bracket: Tuple[float, float], tol: float = 1e-12) -> float:
    lo, hi = bracket
    f_lo, f_hi = f(lo), f(hi)
    if f_lo == 0.0:
        return float(lo)
    if f_hi == 0.0:
        return float(hi)
    if not (np.isfinite(f_lo) and np.isfinite(f_hi)) or f_lo * f_hi > 0:
        raise BracketError(lo, hi, f_lo, f_hi)
    root = sp_optimize.brentq(f, lo, hi, xtol=tol, rtol=4 * _EPS, maxiter=500)
    return float(min(max(root, min(lo, hi)), max(lo, hi)))


def numeric_jacobian(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, rel_step: Optional[float] = None) -> np.ndarray:
    """Central-difference Jacobian, shape (q, p)."""
    x = np.asarray(x, dtype=float)
    step = rel_step if rel_step is not None else _EPS ** (1.0 / 3.0)
    f0 = np.atleast_1d(np.asarray(f(x), dtype=float))
    jac = np.empty((f0.size, x.size))
    for j in range(x.size):
        h = step * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        fp = np.atleast_1d(np.asarray(f(xp), dtype=float))
        fm = np.atleast_1d(np.asarray(f(xm), dtype=float))
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise DerivativeError(f"non-finite evaluation while differencing coordinate {j}")
        jac[:, j] = (fp - fm) / (xp[j] - xm[j])
    return jac


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, rel_step: Optional[float] = None) -> np.ndarray:
    return numeric_jacobian(lambda y: np.array([f(y)]), x, rel_step)[0]


def numeric_hessian(f: Callable[[np.ndarray], float], x: np.ndarray, rel_step: Optional[float] = None) -> np.ndarray:
    """Central second differences, symmetrised as (H + H^T) / 2."""
    x = np.asarray(x, dtype=float)
    p = x.size
    step = rel_step if rel_step is not None else _EPS ** 0.25
    h = step * np.maximum(1.0, np.abs(x))
    f0 = f(x)
    if not np.isfinite(f0):
        raise DerivativeError("non-finite evaluation at the expansion point")
    hess = np.empty((p, p))

    def at(offsets):
        val = f(x + offsets)
        if not np.isfinite(val):
            raise DerivativeError("non-finite evaluation while differencing")
        return val

    for i in range(p):
        ei = np.zeros(p)
        ei[i] = h[i]
        hess[i, i] = (at(ei) - 2.0 * f0 + at(-ei)) / (h[i] ** 2)
        for j in range(i + 1, p):
            ej = np.zeros(p)
            ej[j] = h[j]
            hess[i, j] = (at(ei + ej) - at(ei - ej) - at(-ei + ej) + at(-ei - ej)) / (4.0 * h[i] * h[j])
            hess[j, i] = hess[i, j]
    return 0.5 * (hess + hess.T)


class Minimum(NamedTuple):
    x: np.ndarray
    converged: bool
    fun: float
    iterations: int


def minimize(f: Callable[[np.ndarray], float], x0, gtol: float = 1e-6, maxiter: int = 500) -> Minimum:
    """
    BFGS with central-difference gradients, falling back to Nelder-Mead when
    the line search fails. Convergence is judged on the numeric gradient norm.
    """
    x0 = np.asarray(x0, dtype=float)
    f0 = f(x0)
    if not np.isfinite(f0):
        raise DomainError("objective is not finite at the starting point")
    scale = max(1.0, abs(f0))

    def grad(x):
        return numeric_gradient(f, x)

    res = sp_optimize.minimize(f, x0, jac=grad, method="BFGS", options={"gtol": gtol * scale, "maxiter": maxiter})
    x, iterations = res.x, int(res.nit)
    if not res.success:
        log.debug("BFGS did not converge, falling back to Nelder-Mead", message=str(res.message), iterations=iterations)
        nm = sp_optimize.minimize(
            f, x, method="Nelder-Mead",
            options={"maxiter": maxiter * x0.size, "xatol": 1e-10, "fatol": 1e-12, "adaptive": True},
        )
        iterations += int(nm.nit)
        if nm.fun <= res.fun:
            x = nm.x
        polish = sp_optimize.minimize(f, x, jac=grad, method="BFGS", options={"gtol": gtol * scale, "maxiter": maxiter})
        iterations += int(polish.nit)
        if polish.fun <= f(x):
            x = polish.x
    try:
        gnorm = float(np.linalg.norm(grad(x)))
    except DerivativeError:
        gnorm = math.inf
    fun = float(f(x))
    return Minimum(np.asarray(x, dtype=float), gnorm <= 10.0 * gtol * scale, fun, iterations)


class RngStream:
    """
    Counter-based random stream: (seed, stream_id) fixes every draw.

    The Philox key holds (stream_id, seed); sub-streams reuse the key and start
    at a disjoint counter block, so they never overlap the parent stream.
    """

    def __init__(self, seed: int, stream_id: int, substream: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.substream = int(substream)
        key = np.array([self.stream_id & 0xFFFFFFFFFFFFFFFF, self.seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        counter = np.array([0, 0, 0, self.substream], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key, counter=counter))

    def spawn(self, tag: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, substream=self.substream * 1024 + int(tag) + 1)

    def uniform(self, size=None):
        return self.generator.random(size)

    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def exponential(self, rate: float, size=None):
        if not rate > 0:
            raise DomainError(f"exponential rate must be positive, got {rate!r}")
        return self.generator.exponential(1.0 / rate, size)

    def bernoulli(self, p: float, size=None):
        return self.generator.random(size) < p

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, substream={self.substream})"


def rng_stream(seed: int, stream_id: int) -> RngStream:
    return RngStream(seed, stream_id)
