"""Small dense linear algebra kernel.

All vectorizations use column stacking, so that entry ``(i, j)`` of a
``d x d`` matrix lands at position ``j*d + i`` and

    vec(A @ X @ B.T) == kron(B, A) @ vec(X).
"""
from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import ExpmError, SingularInnovationError

__all__ = [
    "vec",
    "unvec",
    "kron",
    "kron_sum",
    "kron_sum_vector",
    "expm",
    "solve_gain",
    "symmetrize",
]


def _as_finite(a, name="input"):
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def vec(m):
    """Column-stack a square matrix into a vector of length ``d**2``."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"vec expects a square matrix, got shape {m.shape}")
    return m.reshape(-1, order="F")


def unvec(v, d=None):
    """Inverse of :func:`vec`."""
    v = np.asarray(v, dtype=float)
    if d is None:
        d = int(round(np.sqrt(v.size)))
    if d * d != v.size:
        raise ValueError(f"length {v.size} is not a perfect square")
    return v.reshape((d, d), order="F")


def kron(a, b):
    """Kronecker product; block ``(i, j)`` equals ``a[i, j] * b``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    out = a[:, None, :, None] * b[None, :, None, :]
    return out.reshape(a.shape[0] * b.shape[0], a.shape[1] * b.shape[1])


def kron_sum(a, b):
    """Kronecker sum ``a (+) b = a (x) I + I (x) b`` of two n x n matrices.

    With the column-stacking convention ``kron_sum(A, A) @ vec(P)`` equals
    ``vec(A @ P + P @ A.T)``.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[0] != a.shape[1] or b.shape[0] != b.shape[1]:
        raise ValueError("kron_sum expects square matrices")
    if a.shape != b.shape:
        raise ValueError(f"kron_sum size mismatch: {a.shape} vs {b.shape}")
    eye = np.eye(a.shape[0])
    return kron(a, eye) + kron(eye, b)


def kron_sum_vector(v):
    """Kronecker sum of a d-vector with itself, read as ``v (x) I_d + I_d (x) v``.

    Returns a ``d**2 x d`` matrix ``S`` with ``S @ y == vec(v y^T + y v^T)``,
    which is the shape required by the moment equations where this term
    multiplies the current mean.
    """
    v = np.asarray(v, dtype=float).reshape(-1, 1)
    eye = np.eye(v.shape[0])
    return kron(v, eye) + kron(eye, v)


def expm(a):
    """Matrix exponential by scaling and squaring with a diagonal Pade approximant.

    Backed by :func:`scipy.linalg.expm` (degree-13 Pade with 1-norm based
    scaling). Raises :class:`ExpmError` when the result is not finite.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ValueError(f"expm expects a non-empty square matrix, got shape {a.shape}")
    if not np.isfinite(a.sum()):
        raise ExpmError("expm input contains non-finite entries")
    if not a.any():
        return np.eye(a.shape[0])
    out = scipy.linalg.expm(a)
    if not np.isfinite(out.sum()):
        raise ExpmError("matrix exponential overflowed")
    return out


def symmetrize(m):
    return 0.5 * (m + m.T)


def solve_gain(v, c, sigma):
    """Filter gain ``K = V C^T (C V C^T + Sigma)^{-1}``.

    The innovation covariance is factorized by Cholesky. If that fails a ridge
    of ``1e-14 * trace(S) / r`` is added once; if the factorization still
    fails, :class:`SingularInnovationError` is raised.

    Parameters
    ----------
    v : (d, d) array
        Prediction variance.
    c : (r, d) array
        Observation matrix.
    sigma : (r, r) array
        Observation noise covariance.

    Returns
    -------
    (d, r) array
    """
    v = _as_finite(v, "V")
    c = np.atleast_2d(_as_finite(c, "C"))
    sigma = np.atleast_2d(_as_finite(sigma, "Sigma"))
    s = symmetrize(c @ v @ c.T + sigma)
    vct = v @ c.T
    try:
        factor = scipy.linalg.cho_factor(s, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        r = s.shape[0]
        ridge = 1e-14 * np.trace(s) / r
        if not ridge > 0:
            raise SingularInnovationError(
                "innovation covariance is singular (non-positive trace)"
            ) from None
        try:
            factor = scipy.linalg.cho_factor(
                s + ridge * np.eye(r), lower=True, check_finite=False
            )
        except np.linalg.LinAlgError:
            raise SingularInnovationError(
                "innovation covariance is not positive definite after regularization"
            ) from None
    # K S = V C^T  <=>  S K^T = C V^T, and S is symmetric
    return scipy.linalg.cho_solve(factor, vct.T, check_finite=False).T
