"""State and observation models for continuous-discrete filtering.

A :class:`DiffusionModel` describes

    dx = f(t, x) dt + sum_i g_i(t, x) dw_i

together with the analytic derivatives the local linearization consumes.
Array conventions (``d`` state dimension, ``m`` Wiener dimension):

==================  ======================  =====================================
callable            returns                 meaning
==================  ======================  =====================================
``drift``           ``(d,)``                f(t, x)
``diffusion``       ``(d, m)``              G = [g_1, ..., g_m]
``drift_jac``       ``(d, d)``              df^k/dx^j at ``[k, j]``
``drift_dt``        ``(d,)``                df/dt
``drift_hess``      ``(d, d, d)``           d2 f^k / dx^j dx^l at ``[k, j, l]``
``diffusion_jac``   ``(m, d, d)``           B_i = dg_i/dx at ``[i]``
``diffusion_dt``    ``(d, m)``              dg_i/dt in column ``i``
``diffusion_hess``  ``(m, d, d, d)``        d2 g_i^k / dx^j dx^l at ``[i, k, j, l]``
==================  ======================  =====================================

Hessians are only needed for order-2 linearization.

A model flagged ``vectorized=True`` promises that every callable also
accepts a batch, ``t`` of shape ``(n,)`` (or a scalar) and ``x`` of shape
``(n, d)``, and returns the shapes above with a leading ``n`` axis. The
batched engine uses this to advance many realizations at once; other models
are evaluated one realization at a time.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ModelError

__all__ = [
    "DiffusionModel",
    "ObservationModel",
    "NonlinearObservation",
    "ValidationReport",
    "validate_model",
    "augment_nonlinear_observation",
]

Fn = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DiffusionModel:
    dim: int
    n_noise: int
    drift: Fn
    diffusion: Fn
    drift_jac: Fn
    drift_dt: Fn
    diffusion_jac: Fn
    diffusion_dt: Fn
    drift_hess: Optional[Fn] = None
    diffusion_hess: Optional[Fn] = None
    additive_noise: bool = False
    name: str = ""
    vectorized: bool = False

    @property
    def has_hessians(self):
        return self.drift_hess is not None and self.diffusion_hess is not None


@dataclass(frozen=True)
class ObservationModel:
    """Linear observations ``z_k = C x(t_k) + e_k`` with ``e_k ~ N(0, Sigma(t_k))``.

    ``sigma`` is either a constant ``(r, r)`` array (scalars are promoted) or a
    callable ``t -> (r, r)``.
    """

    c: np.ndarray
    sigma: object
    times: np.ndarray

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.c, dtype=float))
        times = np.asarray(self.times, dtype=float).ravel()
        if times.size < 2:
            raise ModelError("need at least two observation times")
        if np.any(np.diff(times) <= 0):
            raise ModelError("observation times must be strictly increasing")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "times", times)
        if not callable(self.sigma):
            s = np.atleast_2d(np.asarray(self.sigma, dtype=float))
            _check_psd(s, c.shape[0])
            object.__setattr__(self, "sigma", s)

    @property
    def dim_obs(self):
        return self.c.shape[0]

    def sigma_at(self, t):
        if callable(self.sigma):
            s = np.atleast_2d(np.asarray(self.sigma(t), dtype=float))
            _check_psd(s, self.dim_obs)
            return s
        return self.sigma


def _check_psd(s, r):
    if s.shape != (r, r):
        raise ModelError(f"Sigma must be {r}x{r}, got {s.shape}")
    if not np.allclose(s, s.T, rtol=1e-12, atol=0.0):
        raise ModelError("Sigma must be symmetric")
    if np.linalg.eigvalsh(s).min() < -1e-12 * max(1.0, np.abs(s).max()):
        raise ModelError("Sigma must be positive semi-definite")


@dataclass(frozen=True)
class NonlinearObservation:
    """Nonlinear observation function ``z_k = h(t_k, x) + e_k``.

    ``jac`` is ``(r, d)``, ``hess`` is ``(r, d, d)`` and ``third`` is
    ``(r, d, d, d)``. The time-derivative bundle (``dt``, ``dt_jac``,
    ``dt_hess``, ``dtt``) may be left as ``None`` for a time-independent ``h``.
    """

    h: Fn
    jac: Fn
    hess: Optional[Fn] = None
    third: Optional[Fn] = None
    dt: Optional[Fn] = None
    dt_jac: Optional[Fn] = None
    dt_hess: Optional[Fn] = None
    dtt: Optional[Fn] = None


@dataclass
class ValidationReport:
    deviations: dict = field(default_factory=dict)
    flagged: list = field(default_factory=list)
    threshold: float = 1e-3

    @property
    def passed(self):
        return not self.flagged

    @property
    def max_deviation(self):
        return max(self.deviations.values(), default=0.0)


def _fd_x(fun, t, x, eps_scale=1e-6):
    """Central differences w.r.t. x; the derivative index is appended last."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = eps_scale * (1.0 + abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += e
        xm[j] -= e
        cols.append((np.asarray(fun(t, xp)) - np.asarray(fun(t, xm))) / (2 * e))
    return np.stack(cols, axis=-1)


def _fd_t(fun, t, x, eps_scale=1e-6):
    e = eps_scale * (1.0 + abs(t))
    return (np.asarray(fun(t + e, x)) - np.asarray(fun(t - e, x))) / (2 * e)


def _deviation(analytic, numeric):
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    if analytic.shape != numeric.shape:
        raise ModelError(f"derivative shape {analytic.shape} != expected {numeric.shape}")
    scale = max(1.0, float(np.abs(numeric).max(initial=0.0)))
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def validate_model(model, probes, threshold=1e-3):
    """Check shapes and compare analytic derivatives with central differences.

    Parameters
    ----------
    model : DiffusionModel
    probes : sequence of (t, x) pairs
    threshold : float
        Relative deviation above which a derivative is flagged.

    Returns
    -------
    ValidationReport
        ``deviations`` maps each derivative name to its worst relative
        deviation over the probes; ``flagged`` lists those above threshold.
    """
    probes = list(probes)
    if not probes:
        raise ValueError("validate_model needs at least one probe")
    d, m = model.dim, model.n_noise
    report = ValidationReport(threshold=threshold)

    def record(name, value):
        report.deviations[name] = max(report.deviations.get(name, 0.0), value)

    for t, x in probes:
        x = np.asarray(x, dtype=float).ravel()
        if x.size != d:
            raise ModelError(f"probe state has length {x.size}, model dim is {d}")
        shapes = {
            "drift": (model.drift(t, x), (d,)),
            "diffusion": (model.diffusion(t, x), (d, m)),
            "drift_jac": (model.drift_jac(t, x), (d, d)),
            "drift_dt": (model.drift_dt(t, x), (d,)),
            "diffusion_jac": (model.diffusion_jac(t, x), (m, d, d)),
            "diffusion_dt": (model.diffusion_dt(t, x), (d, m)),
        }
        if model.drift_hess is not None:
            shapes["drift_hess"] = (model.drift_hess(t, x), (d, d, d))
        if model.diffusion_hess is not None:
            shapes["diffusion_hess"] = (model.diffusion_hess(t, x), (m, d, d, d))
        for name, (val, shape) in shapes.items():
            val = np.asarray(val, dtype=float)
            if val.shape != shape:
                raise ModelError(f"{name} returned shape {val.shape}, expected {shape}")
            if not np.all(np.isfinite(val)):
                raise ModelError(f"{name} is not finite at t={t}, x={x}")

        record("drift_jac", _deviation(model.drift_jac(t, x), _fd_x(model.drift, t, x)))
        record("drift_dt", _deviation(model.drift_dt(t, x), _fd_t(model.drift, t, x)))
        # diffusion is (d, m); FD gives (d, m, d) -> (m, d, d)
        fd_b = np.transpose(_fd_x(model.diffusion, t, x), (1, 0, 2))
        record("diffusion_jac", _deviation(model.diffusion_jac(t, x), fd_b))
        record("diffusion_dt", _deviation(model.diffusion_dt(t, x), _fd_t(model.diffusion, t, x)))
        if model.drift_hess is not None:
            fd_h = _fd_x(model.drift_jac, t, x)
            record("drift_hess", _deviation(model.drift_hess(t, x), fd_h))
        if model.diffusion_hess is not None:
            fd_h = _fd_x(model.diffusion_jac, t, x)
            record("diffusion_hess", _deviation(model.diffusion_hess(t, x), fd_h))

    report.flagged = sorted(k for k, v in report.deviations.items() if v > threshold)
    return report


def _zeros_or(fun, t, x, shape):
    if fun is None:
        return np.zeros(shape)
    return np.asarray(fun(t, x), dtype=float)


def augment_nonlinear_observation(model, obs, times, sigma):
    """Turn ``z = h(t, x) + e`` into a linear observation of an enlarged state.

    The enlarged state is ``v = [x; h(t, x)]``. By Ito's formula its last
    ``r`` components obey

        d h^j = rho^j dt + sum_s sigma_s^j dw_s,
        rho^j = dh^j/dt + sum_k f^k dh^j/dx^k
                + 1/2 sum_s sum_{k,l} g_s^k g_s^l d2h^j/dx^k dx^l,
        sigma_s^j = sum_l g_s^l dh^j/dx^l,

    and the observation matrix becomes ``[0_{r x d}  I_r]``.

    The drift and diffusion of the enlarged model depend on ``x`` only, so
    their Jacobians are block matrices with zero columns for the appended
    coordinates. Jacobians of ``rho`` need third derivatives of ``h``.
    The enlarged model carries no Hessians (order-1 linearization only).

    Returns
    -------
    (DiffusionModel, ObservationModel)
    """
    if obs.hess is None:
        raise ModelError("augmentation needs the Hessian of the observation function")
    if obs.third is None:
        raise ModelError("augmentation needs third derivatives of h for the drift Jacobian")
    d, m = model.dim, model.n_noise
    t_probe = float(np.asarray(times, dtype=float).ravel()[0])
    r = np.atleast_1d(np.asarray(obs.h(t_probe, np.zeros(d)))).size
    D = d + r

    def parts(t, v):
        x = np.asarray(v, dtype=float)[:d]
        f = np.asarray(model.drift(t, x), dtype=float)
        G = np.asarray(model.diffusion(t, x), dtype=float)
        H1 = np.atleast_2d(np.asarray(obs.jac(t, x), dtype=float))
        H2 = np.asarray(obs.hess(t, x), dtype=float).reshape(r, d, d)
        return x, f, G, H1, H2

    def rho(t, x, f, G, H1, H2):
        GG = G @ G.T
        return (
            _zeros_or(obs.dt, t, x, (r,)).reshape(r)
            + H1 @ f
            + 0.5 * np.einsum("jkl,kl->j", H2, GG)
        )

    def drift(t, v):
        x, f, G, H1, H2 = parts(t, v)
        return np.concatenate([f, rho(t, x, f, G, H1, H2)])

    def diffusion(t, v):
        x, f, G, H1, H2 = parts(t, v)
        return np.vstack([G, H1 @ G])

    def drift_jac(t, v):
        x, f, G, H1, H2 = parts(t, v)
        Jf = np.asarray(model.drift_jac(t, x), dtype=float)
        B = np.asarray(model.diffusion_jac(t, x), dtype=float)  # (m, d, d)
        H3 = np.asarray(obs.third(t, x), dtype=float).reshape(r, d, d, d)
        GG = G @ G.T
        # d(GG^T)_{kl}/dx^p = sum_s B_s[k,p] g_s^l + g_s^k B_s[l,p]
        dGG = np.einsum("skp,ls->klp", B, G) + np.einsum("ks,slp->klp", G, B)
        drho = (
            _zeros_or(obs.dt_jac, t, x, (r, d)).reshape(r, d)
            + np.einsum("jkp,k->jp", H2, f)
            + H1 @ Jf
            + 0.5 * np.einsum("jklp,kl->jp", H3, GG)
            + 0.5 * np.einsum("jkl,klp->jp", H2, dGG)
        )
        out = np.zeros((D, D))
        out[:d, :d] = Jf
        out[d:, :d] = drho
        return out

    def drift_dt(t, v):
        x, f, G, H1, H2 = parts(t, v)
        ft = np.asarray(model.drift_dt(t, x), dtype=float)
        Gt = np.asarray(model.diffusion_dt(t, x), dtype=float)
        GG = G @ G.T
        dGG = Gt @ G.T + G @ Gt.T
        drho = (
            _zeros_or(obs.dtt, t, x, (r,)).reshape(r)
            + _zeros_or(obs.dt_jac, t, x, (r, d)).reshape(r, d) @ f
            + H1 @ ft
            + 0.5 * np.einsum("jkl,kl->j", _zeros_or(obs.dt_hess, t, x, (r, d, d)).reshape(r, d, d), GG)
            + 0.5 * np.einsum("jkl,kl->j", H2, dGG)
        )
        return np.concatenate([ft, drho])

    def diffusion_jac(t, v):
        x, f, G, H1, H2 = parts(t, v)
        B = np.asarray(model.diffusion_jac(t, x), dtype=float)
        out = np.zeros((m, D, D))
        out[:, :d, :d] = B
        # d sigma_s^j / dx^p = sum_l H2[j,l,p] g_s^l + H1[j,l] B_s[l,p]
        out[:, d:, :d] = np.einsum("jlp,ls->sjp", H2, G) + np.einsum("jl,slp->sjp", H1, B)
        return out

    def diffusion_dt(t, v):
        x, f, G, H1, H2 = parts(t, v)
        Gt = np.asarray(model.diffusion_dt(t, x), dtype=float)
        Ht = _zeros_or(obs.dt_jac, t, x, (r, d)).reshape(r, d)
        return np.vstack([Gt, Ht @ G + H1 @ Gt])

    augmented = DiffusionModel(
        dim=D,
        n_noise=m,
        drift=drift,
        diffusion=diffusion,
        drift_jac=drift_jac,
        drift_dt=drift_dt,
        diffusion_jac=diffusion_jac,
        diffusion_dt=diffusion_dt,
        name=f"{model.name}+h" if model.name else "augmented",
    )
    c = np.hstack([np.zeros((r, d)), np.eye(r)])
    return augmented, ObservationModel(c=c, sigma=sigma, times=times)
