"""Propagation of the first two moments of the local linear approximation.

Between grid nodes the mean ``y`` and second moment ``P = E[x x^T]`` of the
piecewise linear SDE solve linear ODEs. Both are advanced jointly by one
matrix exponential of an augmented matrix ``M`` of size ``d^2 + 2d + 7``:

    state vector  u = [vec(P); 0_{d+2}; r; 0; 0; 1],  r = (0, ..., 0, 1)

    M = [ Acal  B5    B4    B3  B2  B1 ]     Acal = A (+) A + sum_i B_i (x) B_i
        [ 0     C     I     0   0   0  ]     C    = [[A, a1, A y + a0],
        [ 0     0     C     0   0   0  ]             [0, 0,  1       ],
        [ 0     0     0     0   2   0  ]             [0, 0,  0       ]]
        [ 0     0     0     0   0   1  ]
        [ 0     0     0     0   0   0  ]

and ``y' = y + L2 e^{Mh} u``, ``vec(P') = L1 e^{Mh} u`` where ``L1`` reads the
first ``d^2`` entries and ``L2`` the first ``d`` entries of the third block.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError
from .linalg import expm, symmetrize
from .wll import linearize

__all__ = [
    "MomentState",
    "AugmentedSystem",
    "augmented_size",
    "build_augmented",
    "flow",
    "apply_flow",
    "moment_step",
    "predict_fixed",
    "check_moments",
]


@dataclass(frozen=True)
class MomentState:
    t: float
    y: np.ndarray
    p: np.ndarray

    @property
    def variance(self):
        return symmetrize(self.p - np.outer(self.y, self.y))

    @classmethod
    def from_variance(cls, t, y, v):
        y = np.asarray(y, dtype=float)
        return cls(float(t), y, symmetrize(np.asarray(v, dtype=float) + np.outer(y, y)))


@dataclass(frozen=True)
class AugmentedSystem:
    m_mat: np.ndarray
    u_vec: np.ndarray
    dim: int

    @property
    def mean_slice(self):
        d = self.dim
        start = d * d + d + 2
        return slice(start, start + d)

    @property
    def p_slice(self):
        return slice(0, self.dim * self.dim)


def augmented_size(d):
    return d * d + 2 * d + 7


def _vector_kron_sum(v, eye):
    # v (x) I + I (x) v as a d^2 x d matrix
    d = v.size
    return (v[:, None, None] * eye[None, :, :] + eye[:, None, :] * v[None, :, None]).reshape(d * d, d)


def _bilinear(c, B, dd):
    # sum_i (c_i (x) B_i + B_i (x) c_i) with c_i taken as a column
    d = B.shape[1]
    out = np.einsum("mi,mkl->ikl", c, B) + np.einsum("mil,mk->ikl", B, c)
    return out.reshape(dd, d)


def build_augmented(lin, state):
    """Assemble ``M`` and ``u`` for one linearization interval."""
    d = lin.dim
    y = np.asarray(state.y, dtype=float)
    if y.shape != (d,) or state.p.shape != (d, d):
        raise ValueError("moment state and linearization dimensions disagree")
    A, B = lin.a_mat, lin.b_mats
    a0, a1, b0, b1 = lin.a0, lin.a1, lin.b0, lin.b1
    dd = d * d
    n = dd + 2 * d + 7

    # Kronecker blocks built by broadcasting; index (i*d + k, ...) is the
    # row of vec's position for entry (k, i)
    eye = np.eye(d)
    acal = (A[:, None, :, None] * eye[None, :, None, :] + eye[:, None, :, None] * A[None, :, None, :]).reshape(dd, dd)
    acal += np.einsum("mij,mkl->ikjl", B, B).reshape(dd, dd)
    beta4 = _vector_kron_sum(a0, eye) + _bilinear(b0, B, dd)
    beta5 = _vector_kron_sum(a1, eye) + _bilinear(b1, B, dd)
    # sum_i b_{i,0} b_{i,0}^T etc.; vec of a symmetric matrix is order-agnostic
    beta1 = b0.T @ b0
    beta2 = b0.T @ b1 + b1.T @ b0
    beta3 = b1.T @ b1

    cmat = np.zeros((d + 2, d + 2))
    cmat[:d, :d] = A
    cmat[:d, d] = a1
    cmat[:d, d + 1] = A @ y + a0
    cmat[d, d + 1] = 1.0

    w2 = slice(dd, dd + d + 2)
    w3 = slice(dd + d + 2, dd + 2 * d + 4)
    s0, s1, s2 = n - 3, n - 2, n - 1

    M = np.zeros((n, n))
    M[:dd, :dd] = acal
    M[:dd, w2.start:w2.start + d] = beta5
    M[:dd, w3.start:w3.start + d] = beta4
    M[:dd, s0] = beta3.reshape(-1, order="F")
    M[:dd, s1] = beta2.reshape(-1, order="F") + beta5 @ y
    M[:dd, s2] = beta1.reshape(-1, order="F") + beta4 @ y
    M[w2, w2] = cmat
    M[w2, w3] = np.eye(d + 2)
    M[w3, w3] = cmat
    M[s0, s1] = 2.0
    M[s1, s2] = 1.0

    u = np.zeros(n)
    u[:dd] = state.p.reshape(-1, order="F")
    u[w3.stop - 1] = 1.0
    u[s2] = 1.0
    return AugmentedSystem(m_mat=M, u_vec=u, dim=d)


def flow(aug, h):
    """``e^{M h}``."""
    return expm(aug.m_mat * h)


def apply_flow(aug, phi, state, t_new):
    """Read the moments at ``t_new`` out of ``phi @ u``."""
    d = aug.dim
    w = phi @ aug.u_vec
    y = state.y + w[aug.mean_slice]
    p = symmetrize(w[aug.p_slice].reshape((d, d), order="F"))
    return MomentState(float(t_new), y, p)


def moment_step(lin, state, h):
    """Advance ``state`` by ``h`` with the linearization ``lin`` held fixed."""
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    aug = build_augmented(lin, state)
    return apply_flow(aug, flow(aug, h), state, state.t + h)


def check_moments(state, where=None):
    """Raise :class:`DivergenceError` on non-finite or clearly indefinite moments."""
    t = state.t if where is None else where
    if not (np.all(np.isfinite(state.y)) and np.all(np.isfinite(state.p))):
        raise DivergenceError(f"non-finite moments at t={t}", time=t)
    v = state.variance
    tol = 1e-8 * abs(np.trace(v)) + 1e-12 * (1.0 + np.abs(state.p).max())
    try:
        # cheap sufficient test; the eigenvalue check only runs if it fails
        np.linalg.cholesky(v + (2.0 * tol) * np.eye(v.shape[0]))
        return
    except np.linalg.LinAlgError:
        pass
    if np.linalg.eigvalsh(v).min() < -tol:
        raise DivergenceError(f"prediction variance lost positive semi-definiteness at t={t}", time=t)


def predict_fixed(model, state, t_end, nodes, beta=1):
    """Predict the moments at ``t_end`` on a prescribed node sequence.

    The model is relinearized at every node around the current predicted
    mean. Returns ``(MomentState, variance)``.
    """
    nodes = np.asarray(nodes, dtype=float)
    if nodes.size < 2 or np.any(np.diff(nodes) <= 0):
        raise ValueError("nodes must be strictly increasing with at least two entries")
    if nodes[0] != state.t or nodes[-1] != t_end:
        raise ValueError("nodes must start at state.t and end at t_end")
    for tau, tau_next in zip(nodes[:-1], nodes[1:]):
        lin = linearize(model, tau, state.y, beta)
        aug = build_augmented(lin, state)
        state = apply_flow(aug, flow(aug, tau_next - tau), state, tau_next)
        check_moments(state, where=tau_next)
    return state, state.variance
