"""1-D total-variation denoising by majorize-minimize with tridiagonal solves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .exceptions import InvalidInputError, SingularMatrixError


@dataclass(frozen=True)
class TvdParams:
    lam: float = 0.2
    nit: int = 20

    def __post_init__(self):
        if not (self.lam >= 0.0 and np.isfinite(self.lam)):
            raise InvalidInputError(f"lambda must be finite and >= 0, got {self.lam}")
        if int(self.nit) != self.nit or self.nit < 1:
            raise InvalidInputError(f"nit must be a positive integer, got {self.nit}")


@njit(cache=True)
def _thomas(sub, diag, sup, rhs, out):
    # Returns the index of the first non-positive pivot, or -1 on success.
    n = diag.shape[0]
    cp = np.empty(n)
    piv = diag[0]
    if not piv > 0.0:
        return 0
    cp[0] = sup[0] / piv if n > 1 else 0.0
    out[0] = rhs[0] / piv
    for i in range(1, n):
        piv = diag[i] - sub[i - 1] * cp[i - 1]
        if not piv > 0.0:
            return i
        if i < n - 1:
            cp[i] = sup[i] / piv
        out[i] = (rhs[i] - sub[i - 1] * out[i - 1]) / piv
    for i in range(n - 2, -1, -1):
        out[i] -= cp[i] * out[i + 1]
    return -1


def solve_spd_tridiagonal(sub, diag, sup, rhs) -> np.ndarray:
    """Solve ``A x = rhs`` for a symmetric positive definite tridiagonal ``A``.

    Parameters
    ----------
    sub, sup : array of shape (N - 1,)
        Sub- and super-diagonal entries.
    diag : array of shape (N,)
    rhs : array of shape (N,)

    Raises
    ------
    SingularMatrixError
        If elimination meets a zero or negative pivot.
    """
    sub = np.ascontiguousarray(sub, dtype=np.float64)
    diag = np.ascontiguousarray(diag, dtype=np.float64)
    sup = np.ascontiguousarray(sup, dtype=np.float64)
    rhs = np.ascontiguousarray(rhs, dtype=np.float64)
    n = diag.shape[0]
    if diag.ndim != 1 or n < 1:
        raise InvalidInputError("diag must be a non-empty vector")
    if sub.shape != (n - 1,) or sup.shape != (n - 1,) or rhs.shape != (n,):
        raise InvalidInputError("inconsistent tridiagonal system shapes")
    out = np.empty(n)
    bad = _thomas(sub, diag, sup, rhs, out)
    if bad >= 0:
        raise SingularMatrixError(f"non-positive pivot at row {bad}")
    return out


def tvd_objective(y, y_hat, lam: float) -> float:
    """``0.5 * ||y_hat - y||^2 + lam * sum |diff(y)|``."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape:
        raise InvalidInputError("y and y_hat must have equal length")
    r = y_hat - y
    return float(0.5 * np.dot(r, r) + lam * np.abs(np.diff(y)).sum())


def tvd_denoise(y_hat, params: TvdParams | None = None, *, return_trace: bool = False):
    """Total-variation denoise ``y_hat``.

    Each of the ``params.nit`` iterations rebuilds
    ``F = diag(|D y| / lam) + D D^T`` at the current iterate and sets
    ``y = y_hat - D^T F^{-1} D y_hat``. ``D D^T`` keeps ``F`` positive definite
    even where ``D y`` vanishes. With ``lam == 0`` the input is returned as is.

    If ``return_trace`` is set, also returns the objective after every
    iteration (index 0 is the objective of the input itself).
    """
    params = params or TvdParams()
    y_hat = np.asarray(y_hat, dtype=float)
    if y_hat.ndim != 1 or y_hat.size < 3:
        raise InvalidInputError("tvd_denoise needs a vector of length >= 3")
    y = y_hat.copy()
    trace = [tvd_objective(y, y_hat, params.lam)]
    if params.lam == 0.0:
        return (y, trace) if return_trace else y

    d_yhat = np.diff(y_hat)
    m = d_yhat.size
    # D D^T: 2 on the diagonal, -1 off it.
    off = np.full(m - 1, -1.0)
    for _ in range(params.nit):
        diag = np.abs(np.diff(y)) / params.lam + 2.0
        z = solve_spd_tridiagonal(off, diag, off, d_yhat)
        # D^T z
        dtz = np.empty_like(y)
        dtz[0] = -z[0]
        dtz[1:-1] = z[:-1] - z[1:]
        dtz[-1] = z[-1]
        y = y_hat - dtz
        if return_trace:
            trace.append(tvd_objective(y, y_hat, params.lam))
    return (y, trace) if return_trace else y
