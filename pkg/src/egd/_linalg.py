"""Shared primitives for symmetric positive definite matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

# Eigenvalues below EIG_FLOOR_REL times the largest are clamped before taking
# matrix square roots; clamping that shifts log|M| by more than DET_SHIFT_TOL
# means the matrix is too close to singular to use.
EIG_FLOOR_REL = 1e-14
DET_SHIFT_TOL = 1e-8


def symmetrize(mat: np.ndarray) -> np.ndarray:
    """Average a matrix with its transpose."""
    return 0.5 * (mat + mat.T)


@dataclass(frozen=True, eq=False)
class SpdFactors:
    """Eigendecomposition-derived factors of an SPD matrix."""

    sqrt: np.ndarray
    inv_sqrt: np.ndarray
    eigvals: np.ndarray
    logdet: float


def spd_sqrt_factors(mat: np.ndarray) -> SpdFactors:
    """Symmetric square root, inverse square root and log-determinant.

    Parameters
    ----------
    mat : ndarray
        Symmetric positive definite matrix.

    Returns
    -------
    SpdFactors

    Raises
    ------
    ValueError
        If the matrix has a nonpositive eigenvalue, or if clamping small
        eigenvalues would change the determinant noticeably (the matrix is
        then effectively singular).
    """
    vals, vecs = np.linalg.eigh(symmetrize(np.asarray(mat, dtype=float)))
    largest = float(vals[-1])
    if largest <= 0.0 or vals[0] <= 0.0:
        raise ValueError("matrix is not positive definite")
    clamped = np.maximum(vals, EIG_FLOOR_REL * largest)
    if abs(float(np.sum(np.log(clamped) - np.log(vals)))) > DET_SHIFT_TOL:
        raise ValueError("matrix is effectively singular: eigenvalue clamping "
                         "would alter the determinant")
    root = np.sqrt(clamped)
    return SpdFactors(
        sqrt=(vecs * root) @ vecs.T,
        inv_sqrt=(vecs / root) @ vecs.T,
        eigvals=clamped,
        logdet=float(np.sum(np.log(clamped))),
    )


def chol_lower(mat: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; raises ValueError if the matrix is not SPD."""
    try:
        return scipy.linalg.cholesky(symmetrize(np.asarray(mat, dtype=float)),
                                     lower=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError("matrix is not positive definite") from exc


def quad_forms_from_chol(chol: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Rowwise quadratic forms ``r_i M^{-1} r_i^T`` given ``M = L L^T``."""
    z = scipy.linalg.solve_triangular(chol, rows.T, lower=True)
    return np.einsum("ij,ij->j", z, z)
