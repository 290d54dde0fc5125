"""Order-beta weak local linear coefficients at a base point.

At a base point ``(s, y)`` the drift and diffusion are replaced by

    f  ~  A y + a0 + a1 (t - s)
    g_i ~ B_i y + b_{i,0} + b_{i,1} (t - s)

with ``A = df/dy``, ``B_i = dg_i/dy``, ``a0 = f - A y``,
``a1 = df/ds`` (beta=1) plus ``1/2 sum_{j,l} [G G^T]_{jl} d2f/dy^j dy^l``
(beta=2), and the same construction for each ``g_i``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DivergenceError

__all__ = ["LinearizationData", "linearize"]


@dataclass(frozen=True)
class LinearizationData:
    """Frozen linearization coefficients.

    ``b_mats`` has shape ``(m, d, d)``; ``b0`` and ``b1`` have shape ``(m, d)``
    so that ``b0[i]`` is the vector ``b_{i,0}``.
    """

    base_time: float
    a_mat: np.ndarray
    b_mats: np.ndarray
    a0: np.ndarray
    a1: np.ndarray
    b0: np.ndarray
    b1: np.ndarray
    beta: int

    @property
    def dim(self):
        return self.a_mat.shape[0]

    def drift_at(self, t, y):
        return self.a_mat @ y + self.a0 + self.a1 * (t - self.base_time)

    def diffusion_at(self, t, y):
        """Linearized diffusion ``(d, m)`` evaluated at ``(t, y)``."""
        dt = t - self.base_time
        return (np.einsum("ikl,l->ik", self.b_mats, y) + self.b0 + self.b1 * dt).T


def linearize(model, s, y_base, beta=1):
    """Order-``beta`` linearization of ``model`` at ``(s, y_base)``.

    Raises
    ------
    ConfigurationError
        ``beta`` not in {1, 2}, or ``beta == 2`` on a model without Hessians.
    DivergenceError
        The model returns non-finite values at the base point.
    """
    if beta not in (1, 2):
        raise ConfigurationError(f"beta must be 1 or 2, got {beta!r}")
    if beta == 2 and not model.has_hessians:
        raise ConfigurationError("beta=2 needs drift and diffusion Hessians on the model")
    y = np.asarray(y_base, dtype=float)
    f = np.asarray(model.drift(s, y), dtype=float)
    G = np.asarray(model.diffusion(s, y), dtype=float)
    A = np.asarray(model.drift_jac(s, y), dtype=float)
    B = np.asarray(model.diffusion_jac(s, y), dtype=float)
    ft = np.asarray(model.drift_dt(s, y), dtype=float)
    Gt = np.asarray(model.diffusion_dt(s, y), dtype=float)

    a0 = f - A @ y
    a1 = ft
    b0 = G.T - B @ y
    b1 = Gt.T
    if beta == 2:
        GG = G @ G.T
        a1 = a1 + 0.5 * np.einsum("kjl,jl->k", model.drift_hess(s, y), GG)
        b1 = b1 + 0.5 * np.einsum("ikjl,jl->ik", model.diffusion_hess(s, y), GG)

    for arr in (A, B, a0, a1, b0, b1):
        if not np.all(np.isfinite(arr)):
            raise DivergenceError(f"non-finite linearization at t={s}", time=s)
    return LinearizationData(
        base_time=float(s), a_mat=A, b_mats=B, a0=a0, a1=a1, b0=b0, b1=b1, beta=beta
    )
