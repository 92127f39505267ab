"""Shared utilities and independent reference implementations.

The reference routines here deliberately avoid the package's own code paths
(explicit inverses, direct formula transcriptions, scipy optimizers) so they
can serve as oracles for the library's results.
"""

import numpy as np
from scipy.optimize import linear_sum_assignment, minimize
from scipy.special import gammaln

import egd


def rel_frob(actual, expected):
    actual = np.asarray(actual, dtype=float)
    expected = np.asarray(expected, dtype=float)
    return float(np.linalg.norm(actual - expected)
                 / np.linalg.norm(expected))


def random_spd(dim, rng, ridge=0.1):
    a = rng.standard_normal((dim, dim))
    return a @ a.T + ridge * np.eye(dim)


def make_egd_data(q, a, b, n, seed, sigma=None):
    if sigma is None:
        sigma = random_spd(q, np.random.default_rng(seed + 777))
    scatter = egd.ScatterMatrix(sigma)
    params = egd.EgdParams(scatter, a, b)
    return egd.sample(params, n, seed), scatter


def egd_avg_loglik_reference(samples, weights, sigma, a, b):
    """Average log-likelihood evaluated with explicit inverses."""
    q = sigma.shape[0]
    t = np.einsum("ij,jk,ik->i", samples, np.linalg.inv(sigma), samples)
    const = (gammaln(0.5 * q) - 0.5 * q * np.log(np.pi) - gammaln(a)
             - a * np.log(b))
    per = (const - 0.5 * np.log(np.linalg.det(sigma))
           + (a - 0.5 * q) * np.log(t) - t / b)
    return float(weights @ per / weights.sum())


def golden_gamma_shape(values, weights, lo=1e-3, hi=1e3, tol=1e-10):
    """Golden-section maximizer of the weighted gamma profile likelihood."""
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    w_total = weights.sum()
    vbar = float(weights @ values / w_total)
    mlog = float(weights @ np.log(values) / w_total)

    def profile(a):
        # b = vbar / a maximizes for fixed a
        return (a - 1.0) * mlog - gammaln(a) - a * np.log(vbar / a) - a

    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    x1, x2 = np.log(lo), np.log(hi)
    m1 = x2 - invphi * (x2 - x1)
    m2 = x1 + invphi * (x2 - x1)
    f1, f2 = profile(np.exp(m1)), profile(np.exp(m2))
    while x2 - x1 > tol:
        if f1 < f2:
            x1, m1, f1 = m1, m2, f2
            m2 = x1 + invphi * (x2 - x1)
            f2 = profile(np.exp(m2))
        else:
            x2, m2, f2 = m2, m1, f1
            m1 = x2 - invphi * (x2 - x1)
            f1 = profile(np.exp(m1))
    return float(np.exp(0.5 * (x1 + x2)))


def tyler_reference(samples, tol=1e-10, max_iter=20000):
    """Distribution-free scatter fixed point, trace-normalized each sweep."""
    n, q = samples.shape
    sigma = np.eye(q)
    for _ in range(max_iter):
        t = np.einsum("ij,jk,ik->i", samples, np.linalg.inv(sigma), samples)
        new = (q / n) * (samples / t[:, None]).T @ samples
        new *= q / np.trace(new)
        if np.linalg.norm(new - sigma) / np.linalg.norm(sigma) < tol:
            return new
        sigma = new
    return sigma


def ascent_oracle_avg_loglik(samples, weights, a, b, x0_cov):
    """Maximize the average log-likelihood over Cholesky factors directly."""
    q = samples.shape[1]
    tril = np.tril_indices(q)

    def unpack(theta):
        chol = np.zeros((q, q))
        chol[tril] = theta
        return chol

    def negloglik(theta):
        chol = unpack(theta)
        if np.any(np.abs(np.diag(chol)) < 1e-12):
            return 1e12
        sigma = chol @ chol.T
        try:
            return -egd_avg_loglik_reference(samples, weights, sigma, a, b)
        except (np.linalg.LinAlgError, FloatingPointError):
            return 1e12

    theta0 = np.linalg.cholesky(x0_cov)[tril]
    result = minimize(negloglik, theta0, method="L-BFGS-B",
                      options={"maxiter": 20000, "ftol": 1e-14,
                               "gtol": 1e-10})
    return -float(result.fun)


def align_scatters(fitted, truth):
    """Match fitted components to true ones by scatter Frobenius distance."""
    cost = np.array([[np.linalg.norm(f - t) for t in truth] for f in fitted])
    rows, cols = linear_sum_assignment(cost)
    order = np.empty_like(cols)
    order[rows] = cols
    return order
