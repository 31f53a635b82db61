"""Cholesky helpers shared by the score models and the CMI engine."""

from __future__ import annotations

import numpy as np
from scipy import linalg as la

from cmi_dps.exceptions import FactorizationError


def cholesky(matrix: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    Args:
        matrix: ``d x d`` SPD matrix.
        what: Name used in the error message.

    Raises:
        FactorizationError: If ``matrix`` is not positive definite.
    """
    if not np.all(np.isfinite(matrix)):
        msg = f"{what} has non-finite entries"
        raise FactorizationError(msg)
    try:
        return la.cholesky(matrix, lower=True)
    except la.LinAlgError as exc:
        msg = f"{what} is not positive definite"
        raise FactorizationError(msg) from exc


def chol_solve(chol: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``(L L^T) x = rhs`` given the lower factor ``L``."""
    return la.cho_solve((chol, True), rhs)


def logdet(chol: np.ndarray) -> float:
    """Log-determinant from a Cholesky factor."""
    return float(2.0 * np.sum(np.log(np.diag(chol))))


def logdet_spd(matrix: np.ndarray, what: str = "matrix") -> float:
    """Log-determinant of an SPD matrix; raises FactorizationError otherwise."""
    return logdet(cholesky(matrix, what))


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)
