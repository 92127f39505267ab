"""Weighted maximum likelihood for gamma shape and scale parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.special

__all__ = ["WeightedSample", "GammaFit", "digamma", "trigamma",
           "fit_gamma_weighted"]


def digamma(x):
    """Digamma function on the positive half line."""
    x_arr = np.asarray(x, dtype=float)
    if np.any(x_arr <= 0.0):
        raise ValueError("digamma requires x > 0")
    out = scipy.special.psi(x_arr)
    return float(out) if np.ndim(x) == 0 else out


def trigamma(x):
    """Trigamma function on the positive half line."""
    x_arr = np.asarray(x, dtype=float)
    if np.any(x_arr <= 0.0):
        raise ValueError("trigamma requires x > 0")
    out = scipy.special.polygamma(1, x_arr)
    return float(out) if np.ndim(x) == 0 else out


class WeightedSample:
    """Positive values with nonnegative weights of positive total."""

    __slots__ = ("_values", "_weights")

    def __init__(self, values, weights=None):
        v = np.ascontiguousarray(np.asarray(values, dtype=float))
        if v.ndim != 1 or v.size < 1:
            raise ValueError("values must be a nonempty vector")
        if np.any(v <= 0.0) or not np.all(np.isfinite(v)):
            raise ValueError("values must be positive and finite")
        if weights is None:
            w = np.ones_like(v)
        else:
            w = np.ascontiguousarray(np.asarray(weights, dtype=float))
            if w.shape != v.shape:
                raise ValueError("weights must match values in length")
            if np.any(w < 0.0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be finite and nonnegative")
            if float(w.sum()) <= 0.0:
                raise ValueError("weights must have positive total")
        v.setflags(write=False)
        w.setflags(write=False)
        self._values = v
        self._weights = w

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def weights(self) -> np.ndarray:
        return self._weights


@dataclass(frozen=True)
class GammaFit:
    shape_a: float
    scale_b: float
    iterations: int
    converged: bool


def _bisect_shape(gap: float, start: float, tol: float, max_iter: int):
    """Bisection on the strictly decreasing score log(a) - digamma(a) - gap."""

    def score(a):
        return math.log(a) - digamma(a) - gap

    lo = hi = start
    used = 0
    while score(lo) < 0.0 and lo > 1e-300:
        lo *= 0.5
        used += 1
    while score(hi) > 0.0 and hi < 1e300:
        hi *= 2.0
        used += 1
    for _ in range(max_iter):
        used += 1
        mid = 0.5 * (lo + hi)
        if score(mid) > 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * lo:
            return 0.5 * (lo + hi), used, True
    return 0.5 * (lo + hi), used, False


def fit_gamma_weighted(data: WeightedSample, tol: float = 1e-10,
                       max_iter: int = 100) -> GammaFit:
    """Weighted ML estimate of gamma shape and scale.

    Runs the generalized Newton update on the inverse shape,

        1/a_new = 1/a + (mlog - log(vbar) + log(a) - digamma(a))
                  / (a^2 (1/a - trigamma(a))),

    where ``vbar`` and ``mlog`` are the weighted mean and weighted mean log
    of the values, starting from ``a0 = 0.5 / (log(vbar) - mlog)``.  The
    update divides by ``a^2 (1/a - trigamma(a))``, which is strictly
    negative; if it ever is not, or a step leaves the domain, the solver
    falls back to bisection on the monotone score
    ``log(a) - digamma(a) = log(vbar) - mlog``.  The scale is
    ``b = vbar / a`` exactly.  Iteration stops once the relative shape
    change drops below ``tol``.
    """
    if tol <= 0.0 or max_iter < 1:
        raise ValueError("tol must be positive and max_iter at least 1")
    v = data.values
    w = data.weights
    total = float(w.sum())
    vbar = float(w @ v) / total
    mlog = float(w @ np.log(v)) / total
    gap = math.log(vbar) - mlog
    # gap > 0 by Jensen unless every weighted value is identical
    if gap <= 0.0:
        raise ValueError("degenerate sample: shape unbounded")

    a = 0.5 / gap
    iterations = 0
    converged = False
    fallback = False
    for _ in range(max_iter):
        iterations += 1
        score = math.log(a) - digamma(a) - gap
        denom = a * a * (1.0 / a - trigamma(a))
        if denom >= 0.0 or not math.isfinite(denom):
            fallback = True
            break
        inv_new = 1.0 / a + score / denom
        if inv_new <= 0.0 or not math.isfinite(inv_new):
            fallback = True
            break
        a_new = 1.0 / inv_new
        done = abs(a_new - a) <= tol * a
        a = a_new
        if done:
            converged = True
            break
    if fallback or not converged:
        a, extra, converged = _bisect_shape(gap, a, tol, max(max_iter, 200))
        iterations += extra
    return GammaFit(shape_a=a, scale_b=vbar / a, iterations=iterations,
                    converged=converged)
