"""Scatter-matrix maximum likelihood via fixed-point iterations.

Estimation works on a whitened problem: with constants

    c = -2 (a - q/2) / n_eff,    d = 2 / (b n_eff),

the stationarity condition for the scatter is

    c sum_i w_i S^{-1/2} x_i x_i' S^{-1/2} / (x_i' S^{-1} x_i)
      + d sum_i w_i S^{-1/2} x_i x_i' S^{-1/2}  =  I.

Whitening by ``B = d sum_i w_i x_i x_i'`` absorbs the second sum into a
``Gamma^{-1}`` term and the problem becomes a fixed-point equation in
``Gamma = B^{-1/2} S B^{-1/2}``.  The sign of ``c`` selects the regime:
``c <= 0`` (``a >= q/2``) gives a concave log-likelihood and a globally
convergent inverse-map iteration whose iterate spectra stay inside a fixed
box; ``c > 0`` (``a < q/2``) uses a multiplicative update with a per-step
scalar ``alpha`` chosen either by an eigenvalue case analysis or by a trace
normalization.  A data-augmentation baseline (Kent-Tyler) covers the
``a < q/2`` regime in original coordinates.  All iterations stop when the
average log-likelihood changes by less than ``tol``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from ._linalg import chol_lower, quad_forms_from_chol, spd_sqrt_factors, symmetrize
from .core import Dataset, ScatterMatrix, _log_norm_const

__all__ = [
    "RankDeficiencyError",
    "FixedPointConfig",
    "WhitenedProblem",
    "FitReport",
    "compute_constants",
    "whiten",
    "stationarity_residual",
    "fit_concave",
    "fit_nonconcave",
    "select_alpha",
    "fit_kent_tyler",
    "recover_sigma",
    "fit_scatter",
]

# Quadratic forms are floored here before division; values this small only
# appear for effectively coincident directions.
_DENOM_FLOOR = 1e-300
_NEAR_SINGULAR_REL = 1e-14

_INITS = ("identity", "sample-cov", "user")
_ALPHA_RULES = ("eigen", "trace")


class RankDeficiencyError(ValueError):
    """Raised when the weighted data fail to span R^q."""


@dataclass(frozen=True, eq=False)
class FixedPointConfig:
    """Options shared by the fixed-point scatter fits.

    ``init`` selects the starting matrix: the identity, the weighted sample
    second moment, or a user matrix supplied in original coordinates via
    ``user_matrix``.  ``alpha_rule`` only affects the nonconcave iteration.
    ``residual_check`` controls whether the stationarity residual of the
    final iterate is computed into the report.
    """

    init: str = "sample-cov"
    tol: float = 1e-6
    max_iter: int = 1000
    alpha_rule: str = "eigen"
    residual_check: bool = True
    user_matrix: np.ndarray | None = None

    def __post_init__(self):
        if self.init not in _INITS:
            raise ValueError(f"init must be one of {_INITS}")
        if self.alpha_rule not in _ALPHA_RULES:
            raise ValueError(f"alpha_rule must be one of {_ALPHA_RULES}")
        if not (self.tol > 0.0 and math.isfinite(self.tol)):
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if (self.init == "user") != (self.user_matrix is not None):
            raise ValueError("user_matrix required exactly when init='user'")


@dataclass(frozen=True, eq=False)
class WhitenedProblem:
    """Whitened estimation problem with constants carried alongside.

    ``y`` holds rows ``y_i = B^{-1/2} x_i``; ``shape_a`` and ``scale_b`` are
    recovered from ``(c, d)`` so likelihood traces can include all constant
    terms.
    """

    b_matrix: np.ndarray
    b_half: np.ndarray
    b_half_inv: np.ndarray
    y: np.ndarray
    c: float
    d: float
    weights: np.ndarray
    n: int
    n_eff: float
    dim: int
    logdet_b: float
    shape_a: float
    scale_b: float


@dataclass(frozen=True, eq=False)
class FitReport:
    """Outcome of a scatter fit.

    ``loglik_trace`` holds the average log-likelihood of each accepted
    iterate, so its length equals ``iterations``.  The alpha and lambda
    traces are populated by the nonconcave iteration only; the lambda traces
    record the extreme eigenvalues of the fixed-point map matrix at each
    step.  ``iterate_eig_*`` record the spectral range of each iterate in
    whitened coordinates.  ``near_singular`` flags an abort caused by
    quadratic forms collapsing toward zero.
    """

    sigma_hat: ScatterMatrix
    iterations: int
    converged: bool
    final_residual: float
    loglik_trace: np.ndarray
    elapsed_ms_trace: np.ndarray
    alpha_trace: np.ndarray | None = None
    lambda_max_trace: np.ndarray | None = None
    lambda_min_trace: np.ndarray | None = None
    iterate_eig_min_trace: np.ndarray | None = None
    iterate_eig_max_trace: np.ndarray | None = None
    near_singular: bool = False

    def __post_init__(self):
        if len(self.loglik_trace) != self.iterations:
            raise ValueError("loglik_trace length must equal iterations")


def compute_constants(a: float, b: float, q: int, n_eff: float):
    """Stationarity constants ``c = -2(a - q/2)/n_eff`` and ``d = 2/(b n_eff)``."""
    if not (a > 0.0 and b > 0.0 and n_eff > 0.0 and q >= 1):
        raise ValueError("a, b, n_eff must be positive and q at least 1")
    return -2.0 * (a - 0.5 * q) / n_eff, 2.0 / (b * n_eff)


def whiten(data: Dataset, c: float, d: float) -> WhitenedProblem:
    """Build the whitened problem for constants ``(c, d)``.

    Raises :class:`RankDeficiencyError` when the weighted second moment is
    effectively singular, i.e. the data do not span R^q.
    """
    if d <= 0.0:
        raise ValueError("d must be positive")
    x = data.samples
    w = data.weights
    n_eff = data.total_weight
    b_mat = symmetrize(d * (x * w[:, None]).T @ x)
    try:
        fac = spd_sqrt_factors(b_mat)
    except ValueError as exc:
        raise RankDeficiencyError("data does not span R^q") from exc
    q = data.dim
    return WhitenedProblem(
        b_matrix=b_mat,
        b_half=fac.sqrt,
        b_half_inv=fac.inv_sqrt,
        y=x @ fac.inv_sqrt,
        c=c,
        d=d,
        weights=w,
        n=data.n,
        n_eff=n_eff,
        dim=q,
        logdet_b=fac.logdet,
        shape_a=0.5 * q - 0.5 * c * n_eff,
        scale_b=2.0 / (d * n_eff),
    )


def stationarity_residual(sigma: ScatterMatrix, data: Dataset, c: float,
                          d: float) -> float:
    """Frobenius norm of the stationarity-condition defect at ``sigma``."""
    if sigma.dim != data.dim:
        raise ValueError("sigma dimension does not match data")
    inv_half = spd_sqrt_factors(sigma.entries).inv_sqrt
    v = data.samples @ inv_half
    t = np.maximum(np.einsum("ij,ij->i", v, v), _DENOM_FLOOR)
    coeff = data.weights * (c / t + d)
    m = (v * coeff[:, None]).T @ v
    return float(np.linalg.norm(m - np.eye(sigma.dim), "fro"))


def recover_sigma(gamma_star: np.ndarray, problem: WhitenedProblem) -> ScatterMatrix:
    """Map a whitened solution back: ``Sigma = B^{1/2} Gamma B^{1/2}``."""
    return ScatterMatrix(symmetrize(problem.b_half @ gamma_star @ problem.b_half))


def _initial_gamma(problem: WhitenedProblem, config: FixedPointConfig) -> np.ndarray:
    q = problem.dim
    if config.init == "identity":
        return np.eye(q)
    if config.init == "sample-cov":
        # the weighted second moment is B/(d n_eff), i.e. (b/2) I whitened
        return np.eye(q) * (0.5 * problem.scale_b)
    user = symmetrize(np.asarray(config.user_matrix, dtype=float))
    if user.shape != (q, q):
        raise ValueError("user_matrix has wrong shape")
    return symmetrize(problem.b_half_inv @ user @ problem.b_half_inv)


def _avg_loglik(problem: WhitenedProblem, s: np.ndarray, logdet_gamma: float) -> float:
    a = problem.shape_a
    b = problem.scale_b
    q = problem.dim
    radial = (a - 0.5 * q) * np.log(s) - s / b
    return (_log_norm_const(q, a, b)
            - 0.5 * (problem.logdet_b + logdet_gamma)
            + float(problem.weights @ radial) / problem.n_eff)


def _near_singular(eig_lo: float, eig_hi: float) -> bool:
    # collapse shows up in the iterate's spectrum; the spread of the
    # quadratic forms is no signal, since heavy-tailed data (tiny shape)
    # legitimately mixes huge and vanishing radii
    return not eig_lo > _NEAR_SINGULAR_REL * eig_hi


def _whitened_residual(problem: WhitenedProblem, gamma: np.ndarray,
                       s: np.ndarray) -> float:
    # ||M - I||_F = ||Gamma^{-1/2} (G - Gamma) Gamma^{-1/2}||_F with
    # G = I + c sum_i w_i y_i y_i' / s_i; equal to the original-coordinate
    # residual because the two defects are orthogonally similar.
    y = problem.y
    coeff = problem.c * problem.weights / s
    g = np.eye(problem.dim) + (y * coeff[:, None]).T @ y
    inv_half = spd_sqrt_factors(gamma).inv_sqrt
    return float(np.linalg.norm(inv_half @ (g - gamma) @ inv_half, "fro"))


def fit_concave(problem: WhitenedProblem,
                config: FixedPointConfig | None = None) -> FitReport:
    """Fixed point for the concave regime ``a >= q/2`` (``c <= 0``).

    Iterates ``Gamma <- (c' W + I)^{-1}`` with ``c' = -c`` and ``W`` the
    weighted sum of normalized outer products of ``Gamma^{-1/2} y_i``.  Every
    iterate's spectrum lies in ``[(1 + c' n_eff)^{-1}, 1]``; with ``c = 0``
    the first step lands exactly on the identity, recovering the weighted
    sample second moment after unwhitening.
    """
    config = config or FixedPointConfig()
    if problem.c > 0.0:
        raise ValueError("concave iteration requires a >= dim/2 (c <= 0)")
    c_prime = -problem.c
    w = problem.weights
    q = problem.dim
    eye = np.eye(q)
    start = time.perf_counter()

    def state(gamma):
        vals, vecs = np.linalg.eigh(gamma)
        if vals[0] <= 0.0:
            raise RuntimeError("iterate lost positive definiteness")
        z = problem.y @ ((vecs / np.sqrt(vals)) @ vecs.T)
        s = np.maximum(np.einsum("ij,ij->i", z, z), _DENOM_FLOOR)
        return vals, z, s

    gamma = _initial_gamma(problem, config)
    vals, z, s = state(gamma)
    ll_prev = _avg_loglik(problem, s, float(np.log(vals).sum()))
    lls, eig_lo, eig_hi, elapsed = [], [], [], []
    iterations = 0
    converged = False
    near_singular = False
    for p in range(1, config.max_iter + 1):
        if _near_singular(float(vals[0]), float(vals[-1])):
            near_singular = True
            break
        weight_mat = (z * (w / s)[:, None]).T @ z
        gamma = symmetrize(np.linalg.inv(eye + c_prime * weight_mat))
        vals, z, s = state(gamma)
        ll = _avg_loglik(problem, s, float(np.log(vals).sum()))
        iterations = p
        lls.append(ll)
        eig_lo.append(float(vals[0]))
        eig_hi.append(float(vals[-1]))
        elapsed.append(1000.0 * (time.perf_counter() - start))
        if abs(ll - ll_prev) < config.tol:
            converged = True
            break
        ll_prev = ll
    residual = math.nan
    if config.residual_check and not near_singular:
        try:
            residual = _whitened_residual(problem, gamma, s)
        except ValueError:
            near_singular = True
    return FitReport(
        sigma_hat=recover_sigma(gamma, problem),
        iterations=iterations,
        converged=converged,
        final_residual=residual,
        loglik_trace=np.asarray(lls),
        elapsed_ms_trace=np.asarray(elapsed),
        iterate_eig_min_trace=np.asarray(eig_lo),
        iterate_eig_max_trace=np.asarray(eig_hi),
        near_singular=near_singular,
    )


def _alpha_eigen(c: float, y: np.ndarray, w: np.ndarray, gamma_prime: np.ndarray,
                 s_prime: np.ndarray):
    """Case analysis on the spectrum of the map matrix evaluated at Gamma'.

    Returns ``(alpha, case_id)`` with case 1 leaving the step unscaled,
    case 2 shrinking it so the largest map eigenvalue lands on one, and
    case 3 stretching it so the smallest does.
    """
    q = gamma_prime.shape[0]
    eye = np.eye(q)
    coeff = c * w / s_prime
    g2 = symmetrize(eye + (y * coeff[:, None]).T @ y)
    lam = scipy.linalg.eigh(g2, gamma_prime, eigvals_only=True)
    lam_lo, lam_hi = float(lam[0]), float(lam[-1])
    if lam_hi >= 1.0 >= lam_lo:
        return 1.0, 1
    a_mat = gamma_prime + eye - g2
    avals = np.linalg.eigvalsh(a_mat)
    inv_alpha = float(avals[0]) if lam_hi < 1.0 else float(avals[-1])
    case = 2 if lam_hi < 1.0 else 3
    if not (inv_alpha > 0.0 and math.isfinite(inv_alpha)):
        raise RuntimeError(
            f"alpha selection failed: case {case} produced 1/alpha = {inv_alpha}")
    return 1.0 / inv_alpha, case


def select_alpha(gamma_prime: np.ndarray, c: float, y: np.ndarray,
                 weights: np.ndarray, rule: str = "eigen"):
    """Step scaling for the nonconcave iteration at candidate ``gamma_prime``.

    With ``rule='eigen'`` returns ``(alpha, case_id)`` from the three-way
    eigenvalue analysis.  With ``rule='trace'`` returns the trace
    normalization ``alpha = tr(Gamma'^{-1}) / (2 a mean_weight)`` (case id
    0), where ``a`` is recovered from ``c`` and ``mean_weight`` is the mean
    of the weights, one for unweighted data.
    """
    if rule not in _ALPHA_RULES:
        raise ValueError(f"rule must be one of {_ALPHA_RULES}")
    gamma_prime = np.asarray(gamma_prime, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(weights, dtype=float)
    chol = chol_lower(gamma_prime)
    s_prime = np.maximum(quad_forms_from_chol(chol, y), _DENOM_FLOOR)
    if rule == "eigen":
        return _alpha_eigen(c, y, w, gamma_prime, s_prime)
    q = gamma_prime.shape[0]
    n = y.shape[0]
    n_eff = float(w.sum())
    shape_a = 0.5 * q - 0.5 * c * n_eff
    inv_chol = scipy.linalg.solve_triangular(chol, np.eye(q), lower=True)
    tr_inv = float(np.sum(inv_chol * inv_chol))
    return tr_inv / (2.0 * shape_a * (n_eff / n)), 0


def fit_nonconcave(problem: WhitenedProblem,
                   config: FixedPointConfig | None = None) -> FitReport:
    """Scaled fixed point for the nonconcave regime ``a < q/2`` (``c > 0``).

    Each step forms the candidate
    ``Gamma' = I + c sum_i w_i y_i y_i' / (y_i' Gamma^{-1} y_i)`` and accepts
    ``alpha * Gamma'`` with ``alpha`` from :func:`select_alpha`.  Under the
    eigen rule the extreme eigenvalues of the map matrix bracket one and the
    scaling tends to one as the iteration converges.  ``c = 0`` is accepted
    and lands on the identity in a single step.
    """
    config = config or FixedPointConfig()
    if problem.c < 0.0:
        raise ValueError("nonconcave iteration requires a <= dim/2 (c >= 0)")
    c = problem.c
    y = problem.y
    w = problem.weights
    q = problem.dim
    eye = np.eye(q)
    start = time.perf_counter()

    gamma = _initial_gamma(problem, config)
    chol = chol_lower(gamma)
    s = np.maximum(quad_forms_from_chol(chol, y), _DENOM_FLOOR)
    ll_prev = _avg_loglik(problem, s,
                          2.0 * float(np.sum(np.log(np.diag(chol)))))
    lls, alphas, lam_hi_tr, lam_lo_tr = [], [], [], []
    eig_lo, eig_hi, elapsed = [], [], []
    iterations = 0
    converged = False
    near_singular = False
    for p in range(1, config.max_iter + 1):
        coeff = c * w / s
        g_prime = symmetrize(eye + (y * coeff[:, None]).T @ y)
        try:
            lam_n = scipy.linalg.eigh(g_prime, gamma, eigvals_only=True)
            gvals, gvecs = np.linalg.eigh(g_prime)
        except np.linalg.LinAlgError:
            near_singular = True
            break
        # mathematically Gamma' >= I; a violated bound or an exploding
        # condition number means the trajectory left the usable SPD cone
        if (not np.all(np.isfinite(gvals)) or gvals[0] <= 1e-8
                or _near_singular(float(gvals[0]), float(gvals[-1]))):
            near_singular = True
            break
        ty = y @ gvecs
        s_prime = np.maximum((ty * ty) @ (1.0 / gvals), _DENOM_FLOOR)
        if config.alpha_rule == "eigen":
            alpha, _case = _alpha_eigen(c, y, w, g_prime, s_prime)
        else:
            alpha = float(np.sum(1.0 / gvals)) / (
                2.0 * problem.shape_a * (problem.n_eff / problem.n))
        if not (alpha > 0.0 and math.isfinite(alpha)):
            raise RuntimeError(f"alpha selection failed: alpha = {alpha}")
        gamma = alpha * g_prime
        s = s_prime / alpha
        ll = _avg_loglik(problem, s,
                         q * math.log(alpha) + float(np.log(gvals).sum()))
        iterations = p
        lls.append(ll)
        alphas.append(alpha)
        lam_lo_tr.append(float(lam_n[0]))
        lam_hi_tr.append(float(lam_n[-1]))
        eig_lo.append(alpha * float(gvals[0]))
        eig_hi.append(alpha * float(gvals[-1]))
        elapsed.append(1000.0 * (time.perf_counter() - start))
        if abs(ll - ll_prev) < config.tol:
            converged = True
            break
        ll_prev = ll
    residual = math.nan
    if config.residual_check and not near_singular:
        try:
            residual = _whitened_residual(problem, gamma, s)
        except ValueError:
            near_singular = True
    return FitReport(
        sigma_hat=recover_sigma(gamma, problem),
        iterations=iterations,
        converged=converged,
        final_residual=residual,
        loglik_trace=np.asarray(lls),
        elapsed_ms_trace=np.asarray(elapsed),
        alpha_trace=np.asarray(alphas),
        lambda_max_trace=np.asarray(lam_hi_tr),
        lambda_min_trace=np.asarray(lam_lo_tr),
        iterate_eig_min_trace=np.asarray(eig_lo),
        iterate_eig_max_trace=np.asarray(eig_hi),
        near_singular=near_singular,
    )


def fit_kent_tyler(data: Dataset, a: float, b: float,
                   config: FixedPointConfig | None = None) -> FitReport:
    """Data-augmentation baseline for the regime ``a < q/2``.

    Iterates ``Sigma <- n_eff^{-1} sum_i w_i u(t_i) x_i x_i'`` with
    ``t_i = x_i' Sigma^{-1} x_i`` and ``u(t) = (q - 2a)/t + 2/b``, stopping
    on the same average log-likelihood criterion as the fixed-point fits.
    """
    config = config or FixedPointConfig()
    q = data.dim
    if not (a > 0.0 and b > 0.0):
        raise ValueError("a and b must be positive")
    if a >= 0.5 * q:
        raise ValueError("Kent-Tyler iteration requires a < dim/2")
    c, d = compute_constants(a, b, q, data.total_weight)
    x = data.samples
    w = data.weights
    n_eff = data.total_weight
    const = _log_norm_const(q, a, b)
    start = time.perf_counter()

    if config.init == "identity":
        sigma = np.eye(q)
    elif config.init == "sample-cov":
        sigma = symmetrize((x * w[:, None]).T @ x / n_eff)
    else:
        sigma = symmetrize(np.asarray(config.user_matrix, dtype=float))
        if sigma.shape != (q, q):
            raise ValueError("user_matrix has wrong shape")

    def state(mat):
        chol = chol_lower(mat)
        diag = np.diag(chol)
        if _near_singular(float(diag.min()) ** 2, float(diag.max()) ** 2):
            raise ValueError("iterate is near singular")
        t = np.maximum(quad_forms_from_chol(chol, x), _DENOM_FLOOR)
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        ll = (const - 0.5 * logdet
              + float(w @ ((a - 0.5 * q) * np.log(t) - t / b)) / n_eff)
        return t, ll

    t, ll_prev = state(sigma)
    lls, elapsed = [], []
    iterations = 0
    converged = False
    near_singular = False
    for p in range(1, config.max_iter + 1):
        u = (q - 2.0 * a) / t + 2.0 / b
        candidate = symmetrize((x * (w * u)[:, None]).T @ x / n_eff)
        try:
            t, ll = state(candidate)
        except (ValueError, np.linalg.LinAlgError):
            # update left the factorizable SPD cone; keep the last iterate
            near_singular = True
            break
        sigma = candidate
        iterations = p
        lls.append(ll)
        elapsed.append(1000.0 * (time.perf_counter() - start))
        if abs(ll - ll_prev) < config.tol:
            converged = True
            break
        ll_prev = ll
    sigma_hat = ScatterMatrix(sigma)
    residual = math.nan
    if config.residual_check and not near_singular:
        try:
            residual = stationarity_residual(sigma_hat, data, c, d)
        except ValueError:
            near_singular = True
    return FitReport(
        sigma_hat=sigma_hat,
        iterations=iterations,
        converged=converged,
        final_residual=residual,
        loglik_trace=np.asarray(lls),
        elapsed_ms_trace=np.asarray(elapsed),
        near_singular=near_singular,
    )


def fit_scatter(data: Dataset, a: float, b: float,
                config: FixedPointConfig | None = None) -> FitReport:
    """Fit the scatter for fixed ``(a, b)``, dispatching on the sign of ``c``."""
    c, d = compute_constants(a, b, data.dim, data.total_weight)
    problem = whiten(data, c, d)
    if c <= 0.0:
        return fit_concave(problem, config)
    return fit_nonconcave(problem, config)
