"""Numerically stable primitives shared by the model and the fitting code.

Everything here is a pure function of its arguments and accepts either
scalars or numpy arrays.
"""

import numpy as np
from scipy.special import expit

from .exceptions import NumericalBreakdown

PROB_EPS = 1e-12
XI_SMALL = 1e-6


def sigmoid(x):
    """Logistic function, clamped to ``[1e-12, 1 - 1e-12]``.

    ``scipy.special.expit`` already evaluates the branch that cannot
    overflow, so only the clamp is added here.
    """
    out = np.clip(expit(x), PROB_EPS, 1.0 - PROB_EPS)
    return float(out) if np.ndim(out) == 0 else out


def log_sigmoid(x):
    """``log(sigmoid(x))`` without the clamp, stable for large ``|x|``."""
    out = -np.logaddexp(0.0, -np.asarray(x, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def logit(p):
    p = np.asarray(p, dtype=float)
    out = np.log(p) - np.log1p(-p)
    return float(out) if out.ndim == 0 else out


def jaakkola_b(xi):
    """Coefficient ``(1/2 - sigmoid(xi)) / (2 xi)`` of the quadratic logistic bound.

    The function is even in ``xi`` and strictly negative; below ``1e-6``
    the analytic limit ``-1/8`` is returned.
    """
    xi = np.abs(np.asarray(xi, dtype=float))
    small = xi < XI_SMALL
    safe = np.where(small, 1.0, xi)
    # 1/2 - sigmoid(xi) == -tanh(xi / 2) / 2
    out = np.where(small, -0.125, np.tanh(0.5 * safe) / (-4.0 * safe))
    return float(out) if out.ndim == 0 else out


def log_sum_exp(values, axis=None):
    """``log(sum(exp(values)))`` by max-shifting.

    With ``axis=None`` the input is treated as one flat sequence, which must
    be non-empty.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty sequence")
    vmax = np.max(v, axis=axis, keepdims=True)
    # all -inf along the axis: keep the shift finite
    vmax = np.where(np.isfinite(vmax), vmax, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - vmax), axis=axis, keepdims=True)) + vmax
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def cholesky_logdet(A, **context):
    """Cholesky factor of a (batch of) SPD matrix and its log-determinant.

    Raises
    ------
    NumericalBreakdown
        If any matrix in the batch is not positive definite.
    """
    A = np.asarray(A, dtype=float)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NumericalBreakdown("matrix is not positive definite", **context) from exc
    diag = np.diagonal(L, axis1=-2, axis2=-1)
    if not np.all(np.isfinite(diag)):
        raise NumericalBreakdown("non-finite Cholesky factor", **context)
    return L, 2.0 * np.sum(np.log(diag), axis=-1)


def solve_spd(A, b, **context):
    """Solve ``A x = b`` for symmetric positive definite ``A``.

    Works on single systems or stacked batches (``A`` of shape
    ``(..., k, k)``, ``b`` of shape ``(..., k)`` or ``(..., k, r)``).

    Returns
    -------
    x : ndarray
        The solution, same shape as ``b``.
    logdet : float or ndarray
        ``log|A|`` from the Cholesky factor.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    L, logdet = cholesky_logdet(A, **context)
    vec = b.ndim == A.ndim - 1
    rhs = b[..., None] if vec else b
    # forward then backward substitution via the triangular factor
    y = np.linalg.solve(L, rhs)
    x = np.linalg.solve(np.swapaxes(L, -1, -2), y)
    if vec:
        x = x[..., 0]
    if np.ndim(logdet) == 0:
        logdet = float(logdet)
    return x, logdet
