"""Registry of the four benchmark state space models.

``ex1``  dx = a t x dt + sigma sqrt(t) x dw                      (multiplicative)
``ex2``  dx = a t x dt + sigma1 t^p e^{a t^2/2} dw1 + sigma2 sqrt(t) dw2   (additive)
``ex3``  Van der Pol oscillator with random input                (additive)
``ex4``  Van der Pol oscillator with random frequency            (multiplicative)

All four are observed through their first state component at
``t_k = t0 + k``, ``k = 0..9``.

All callables broadcast over leading batch axes of ``x`` (shape ``(..., d)``)
with ``t`` a scalar or an array of the batch shape, so that many paths or
filter runs can be advanced at once.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .model import DiffusionModel, ObservationModel

__all__ = ["ExampleSpec", "DEFAULT_PARAMS", "EXAMPLE_IDS", "get_example", "load_config"]

EXAMPLE_IDS = ("ex1", "ex2", "ex3", "ex4")

DEFAULT_PARAMS = {
    "ex1": dict(a=-0.1, sigma=0.1, t0=0.5, Sigma=1e-4, x0=[1.0], Q0=[[1.0]]),
    "ex2": dict(a=-0.25, p=2, sigma1=5.0, sigma2=0.1, t0=0.01, Sigma=1e-4, x0=[10.0], Q0=[[100.0]]),
    "ex3": dict(a=0.5, sigma=0.75, t0=0.0, Sigma=1e-3, x0=[1.0, 1.0], Q0=[[1.0, 1.0], [1.0, 1.0]]),
    "ex4": dict(varpi=1.0, sigma=1.0, t0=0.0, Sigma=1e-3, x0=[1.0, 1.0], Q0=[[1.0, 1.0], [1.0, 1.0]]),
}

N_OBSERVATIONS = 10


@dataclass
class ExampleSpec:
    """A benchmark model bundled with its observation scheme and initial moments."""

    name: str
    params: dict
    model: DiffusionModel
    observation: ObservationModel
    x0: np.ndarray
    q0: np.ndarray
    reference_tolerances: dict = field(default_factory=dict)

    @property
    def has_exact_filter(self):
        return self.name in ("ex1", "ex2")


def _bt(t, x):
    """Time as an array broadcastable against the batch axes of ``x``."""
    return np.asarray(t, dtype=float) * np.ones(np.shape(x)[:-1])


def _full(shape_tail, x):
    return np.zeros(np.shape(x)[:-1] + shape_tail)


def _ex1(a, sigma):
    def drift(t, x):
        x = np.asarray(x, dtype=float)
        return a * _bt(t, x)[..., None] * x

    def diffusion(t, x):
        x = np.asarray(x, dtype=float)
        return (sigma * np.sqrt(_bt(t, x))[..., None] * x)[..., None]

    def drift_jac(t, x):
        return (a * _bt(t, x))[..., None, None]

    def drift_dt(t, x):
        return a * np.asarray(x, dtype=float)

    def diffusion_jac(t, x):
        return (sigma * np.sqrt(_bt(t, x)))[..., None, None, None]

    def diffusion_dt(t, x):
        x = np.asarray(x, dtype=float)
        return (sigma * x / (2.0 * np.sqrt(_bt(t, x)))[..., None])[..., None]

    return DiffusionModel(
        dim=1,
        n_noise=1,
        drift=drift,
        diffusion=diffusion,
        drift_jac=drift_jac,
        drift_dt=drift_dt,
        diffusion_jac=diffusion_jac,
        diffusion_dt=diffusion_dt,
        drift_hess=lambda t, x: _full((1, 1, 1), x),
        diffusion_hess=lambda t, x: _full((1, 1, 1, 1), x),
        name="ex1",
        vectorized=True,
    )


def _ex2(a, p, sigma1, sigma2):
    def g(t):
        return np.stack([sigma1 * t**p * np.exp(a * t * t / 2.0), sigma2 * np.sqrt(t)], axis=-1)

    def g_dt(t):
        e = np.exp(a * t * t / 2.0)
        return np.stack(
            [sigma1 * (p * t ** (p - 1) + a * t ** (p + 1)) * e, sigma2 / (2.0 * np.sqrt(t))], axis=-1
        )

    def drift(t, x):
        x = np.asarray(x, dtype=float)
        return a * _bt(t, x)[..., None] * x

    def diffusion(t, x):
        return g(_bt(t, x))[..., None, :]

    return DiffusionModel(
        dim=1,
        n_noise=2,
        drift=drift,
        diffusion=diffusion,
        drift_jac=lambda t, x: (a * _bt(t, x))[..., None, None],
        drift_dt=lambda t, x: a * np.asarray(x, dtype=float),
        diffusion_jac=lambda t, x: _full((2, 1, 1), x),
        diffusion_dt=lambda t, x: g_dt(_bt(t, x))[..., None, :],
        drift_hess=lambda t, x: _full((1, 1, 1), x),
        diffusion_hess=lambda t, x: _full((2, 1, 1, 1), x),
        additive_noise=True,
        name="ex2",
        vectorized=True,
    )


def _vdp_drift(x1, x2, restoring, forcing):
    return np.stack([x2, -(x1 * x1 - 1.0) * x2 - restoring * x1 + forcing], axis=-1)


def _vdp_jac(x, restoring):
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    out = _full((2, 2), x)
    out[..., 0, 1] = 1.0
    out[..., 1, 0] = -2.0 * x1 * x2 - restoring
    out[..., 1, 1] = -(x1 * x1 - 1.0)
    return out


def _vdp_hess(x):
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    h = _full((2, 2, 2), x)
    h[..., 1, 0, 0] = -2.0 * x2
    h[..., 1, 0, 1] = -2.0 * x1
    h[..., 1, 1, 0] = -2.0 * x1
    return h


def _ex3(a, sigma):
    def drift(t, x):
        x = np.asarray(x, dtype=float)
        return _vdp_drift(x[..., 0], x[..., 1], 1.0, a)

    def diffusion(t, x):
        out = _full((2, 1), x)
        out[..., 1, 0] = sigma
        return out

    return DiffusionModel(
        dim=2,
        n_noise=1,
        drift=drift,
        diffusion=diffusion,
        drift_jac=lambda t, x: _vdp_jac(x, 1.0),
        drift_dt=lambda t, x: _full((2,), x),
        diffusion_jac=lambda t, x: _full((1, 2, 2), x),
        diffusion_dt=lambda t, x: _full((2, 1), x),
        drift_hess=lambda t, x: _vdp_hess(x),
        diffusion_hess=lambda t, x: _full((1, 2, 2, 2), x),
        additive_noise=True,
        name="ex3",
        vectorized=True,
    )


def _ex4(varpi, sigma):
    def drift(t, x):
        x = np.asarray(x, dtype=float)
        return _vdp_drift(x[..., 0], x[..., 1], varpi, 0.0)

    def diffusion(t, x):
        x = np.asarray(x, dtype=float)
        out = _full((2, 1), x)
        out[..., 1, 0] = sigma * x[..., 0]
        return out

    def diffusion_jac(t, x):
        out = _full((1, 2, 2), x)
        out[..., 0, 1, 0] = sigma
        return out

    return DiffusionModel(
        dim=2,
        n_noise=1,
        drift=drift,
        diffusion=diffusion,
        drift_jac=lambda t, x: _vdp_jac(x, varpi),
        drift_dt=lambda t, x: _full((2,), x),
        diffusion_jac=diffusion_jac,
        diffusion_dt=lambda t, x: _full((2, 1), x),
        drift_hess=lambda t, x: _vdp_hess(x),
        diffusion_hess=lambda t, x: _full((1, 2, 2, 2), x),
        name="ex4",
        vectorized=True,
    )


_REFERENCE_TOLERANCES = {
    "ex1": dict(rtol_y=5e-9, atol_y=5e-9, rtol_P=5e-9, atol_P=5e-12),
    "ex2": dict(rtol_y=5e-8, atol_y=5e-8, rtol_P=5e-8, atol_P=5e-11),
    "ex3": dict(rtol_y=5e-8, atol_y=5e-8, rtol_P=5e-8, atol_P=5e-11),
    "ex4": dict(rtol_y=1e-7, atol_y=1e-7, rtol_P=1e-7, atol_P=1e-10),
}


def get_example(name, overrides=None):
    """Build a registered example, optionally overriding its parameters."""
    if name not in DEFAULT_PARAMS:
        raise ConfigurationError(f"unknown example id {name!r}; choose one of {EXAMPLE_IDS}")
    params = dict(DEFAULT_PARAMS[name])
    unknown = set(overrides or {}) - set(params)
    if unknown:
        raise ConfigurationError(f"unknown parameter(s) for {name}: {sorted(unknown)}")
    params.update(overrides or {})

    if name == "ex1":
        model = _ex1(params["a"], params["sigma"])
    elif name == "ex2":
        model = _ex2(params["a"], params["p"], params["sigma1"], params["sigma2"])
    elif name == "ex3":
        model = _ex3(params["a"], params["sigma"])
    else:
        model = _ex4(params["varpi"], params["sigma"])

    d = model.dim
    c = np.zeros((1, d))
    c[0, 0] = 1.0
    times = params["t0"] + np.arange(N_OBSERVATIONS, dtype=float)
    obs = ObservationModel(c=c, sigma=params["Sigma"], times=times)
    x0 = np.asarray(params["x0"], dtype=float).reshape(d)
    q0 = np.asarray(params["Q0"], dtype=float).reshape(d, d)
    return ExampleSpec(
        name=name,
        params=params,
        model=model,
        observation=obs,
        x0=x0,
        q0=q0,
        reference_tolerances=dict(_REFERENCE_TOLERANCES[name]),
    )


def load_config(path):
    """Read a JSON config file.

    Recognised top-level keys: ``example`` (id), ``params`` (model parameter
    overrides, keys ``a, sigma, sigma1, sigma2, p, varpi, t0, Sigma, x0, Q0``)
    and ``adaptive`` (keys ``rtol_y, atol_y, rtol_P, atol_P, h_min, h_max,
    prs``). Model parameters may also appear at top level.
    """
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ConfigurationError("config file must hold a JSON object")
    known = {"a", "sigma", "sigma1", "sigma2", "p", "varpi", "t0", "Sigma", "x0", "Q0"}
    params = dict(data.get("params", {}))
    params.update({k: v for k, v in data.items() if k in known})
    return {
        "example": data.get("example"),
        "params": params,
        "adaptive": dict(data.get("adaptive", {})),
    }
