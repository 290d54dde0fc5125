"""Ground-truth trajectories and noisy observation series.

Every realization owns an :class:`RngStream`; its path noise and observation
noise come from separate counter-based (Philox) generators keyed by
``(seed, stream_id, purpose)``, so a realization's draws do not depend on how
many other realizations exist or in which order they are generated.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DivergenceError, ModelError
from .batch import _moment_step, _variance

__all__ = [
    "PathGrid",
    "RngStream",
    "Path",
    "ObservationSeries",
    "euler_path",
    "euler_paths",
    "ll_path",
    "ll_paths",
    "observe",
    "simulate_observations",
    "DEFAULT_DELTA",
]

DEFAULT_DELTA = 1e-3

_PURPOSES = {"path": 0, "observation": 1}
_EPS = float(np.finfo(float).eps)


@dataclass(frozen=True)
class PathGrid:
    """Uniform fine grid ``t0 + j*delta``, ``j = 0..n_steps``."""

    t0: float
    delta: float
    n_steps: int

    def __post_init__(self):
        if not (self.delta > 0 and np.isfinite(self.delta)):
            raise ConfigurationError("path step delta must be positive")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigurationError("n_steps must be a positive integer")

    @classmethod
    def covering(cls, t0, t_end, delta=DEFAULT_DELTA):
        """Grid from ``t0`` to ``t_end``; the span must be a multiple of ``delta``."""
        ratio = (t_end - t0) / delta
        n = int(round(ratio))
        if n < 1 or abs(ratio - n) > 1e-6 * max(1.0, ratio):
            raise ConfigurationError(f"[{t0}, {t_end}] is not a whole number of steps of {delta}")
        return cls(float(t0), float(delta), n)

    @property
    def times(self):
        return self.t0 + self.delta * np.arange(self.n_steps + 1)

    @property
    def t_end(self):
        return self.t0 + self.delta * self.n_steps


@dataclass(frozen=True)
class RngStream:
    """Reproducible per-realization source of standard normal draws."""

    seed: int
    stream_id: int

    def generator(self, purpose="path"):
        key = (int(self.stream_id), _PURPOSES[purpose])
        ss = np.random.SeedSequence(int(self.seed), spawn_key=key)
        return np.random.Generator(np.random.Philox(ss))

    def normal(self, shape, purpose="path"):
        return self.generator(purpose).standard_normal(shape)


@dataclass
class Path:
    t: np.ndarray
    x: np.ndarray

    def to_csv(self, path=None):
        header = ["t"] + [f"x[{i}]" for i in range(self.x.shape[1])]
        return _write_csv(header, self.t, self.x, path)


@dataclass
class ObservationSeries:
    t: np.ndarray
    z: np.ndarray

    def to_csv(self, path=None):
        header = ["t_k"] + [f"z[{i}]" for i in range(self.z.shape[1])]
        return _write_csv(header, self.t, self.z, path)


def _write_csv(header, t, values, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for tk, row in zip(t, values):
        w.writerow([repr(float(tk))] + [repr(float(v)) for v in row])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def _psd_factor(v):
    """``L`` with ``L L^T = v`` for a symmetric PSD ``v`` (tolerates singular ``v``)."""
    v = np.atleast_2d(v)
    try:
        return np.linalg.cholesky(v)
    except np.linalg.LinAlgError:
        w, u = np.linalg.eigh(0.5 * (v + v.T))
        return u * np.sqrt(np.clip(w, 0.0, None))


def euler_paths(model, grid, x0, rngs):
    """Euler-Maruyama paths for several realizations at once.

    Returns an array of shape ``(len(rngs), n_steps + 1, d)``. The noise of
    realization ``i`` comes only from ``rngs[i]``, so the result for one
    stream does not depend on the others.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (model.dim,):
        raise ValueError(f"x0 must have shape ({model.dim},)")
    n, dt = grid.n_steps, grid.delta
    noise = np.stack([r.normal((n, model.n_noise), "path") for r in rngs]) * np.sqrt(dt)
    out = np.empty((len(rngs), n + 1, model.dim))
    out[:, 0] = x0
    x = out[:, 0].copy()
    times = grid.times
    for j in range(n):
        t = times[j]
        f, g = _batch_coefficients(model, t, x)
        x = x + f * dt + np.einsum("pdm,pm->pd", g, noise[:, j])
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"Euler path became non-finite at step {j + 1}", time=times[j + 1])
        out[:, j + 1] = x
    return out


def _batch_coefficients(model, t, x):
    """Drift ``(p, d)`` and diffusion ``(p, d, m)`` at a batch of states.

    Models whose callables do not broadcast over a leading axis are
    evaluated row by row.
    """
    p, d, m = x.shape[0], model.dim, model.n_noise
    try:
        f = np.asarray(model.drift(t, x), dtype=float)
        g = np.asarray(model.diffusion(t, x), dtype=float)
        if f.shape == (p, d) and g.shape == (p, d, m):
            return f, g
    except (ValueError, IndexError):
        pass
    f = np.stack([np.asarray(model.drift(t, xi), dtype=float) for xi in x])
    g = np.stack([np.asarray(model.diffusion(t, xi), dtype=float).reshape(d, m) for xi in x])
    return f, g


def euler_path(model, grid, x0, rng):
    """Single Euler-Maruyama path on ``grid``."""
    return Path(grid.times, euler_paths(model, grid, x0, [rng])[0])


def ll_paths(model, grid, x0, rngs):
    """Local linearization paths for an additive-noise model, one per stream.

    Each step propagates the point mass at the current state with the
    order-1 moment flow: the new mean is the LL ODE step and the variance is
    the exact Gaussian noise covariance of the linearized step. Returns an
    array of shape ``(len(rngs), n_steps + 1, d)``.
    """
    if not model.additive_noise:
        raise ModelError("ll_path needs an additive-noise model")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (model.dim,):
        raise ValueError(f"x0 must have shape ({model.dim},)")
    n, steps = len(rngs), grid.n_steps
    xi = np.stack([r.normal((steps, model.dim), "path") for r in rngs])
    out = np.empty((n, steps + 1, model.dim))
    out[:, 0] = x0
    x = out[:, 0].copy()
    times = grid.times
    h = np.full(n, grid.delta)
    for j in range(steps):
        y, p, _, _, bad = _moment_step(model, np.full(n, times[j]), x, x[:, :, None] * x[:, None, :], h, 1)
        v = _variance(y, p)
        # P - y y^T cannot resolve variances below roundoff in P
        v[np.abs(v) <= 64 * _EPS * np.abs(p).max(axis=(1, 2))[:, None, None]] = 0.0
        x = y + np.einsum("nij,nj->ni", _psd_factors(v), xi[:, j])
        if bad.any() or not np.all(np.isfinite(x)):
            raise DivergenceError(f"LL path became non-finite at step {j + 1}", time=times[j + 1])
        out[:, j + 1] = x
    return out


def _psd_factors(v):
    try:
        return np.linalg.cholesky(v)
    except np.linalg.LinAlgError:
        return np.stack([_psd_factor(vi) for vi in v])


def ll_path(model, grid, x0, rng):
    """Single local linearization path on ``grid`` (see :func:`ll_paths`)."""
    return Path(grid.times, ll_paths(model, grid, x0, [rng])[0])


def _grid_indices(t_path, times):
    t_path = np.asarray(t_path, dtype=float)
    idx = np.searchsorted(t_path, times)
    out = []
    for tk, i in zip(times, idx):
        best = None
        for j in (i - 1, i):
            if 0 <= j < t_path.size and abs(t_path[j] - tk) <= 1e-9 * max(1.0, abs(tk)):
                best = j
        if best is None:
            raise ConfigurationError(f"observation time {tk} is not a node of the path grid")
        out.append(best)
    return np.asarray(out)


def observe(path, obs, rng):
    """Noisy linear observations ``z_k = C x(t_k) + e_k`` of ``path``."""
    idx = _grid_indices(path.t, obs.times)
    e = rng.normal((obs.times.size, obs.dim_obs), "observation")
    z = np.empty((obs.times.size, obs.dim_obs))
    for k, (tk, j) in enumerate(zip(obs.times, idx)):
        z[k] = obs.c @ path.x[j] + _psd_factor(obs.sigma_at(tk)) @ e[k]
    return ObservationSeries(obs.times.copy(), z)


def simulate_observations(model, obs, x0, n, seed, delta=DEFAULT_DELTA, scheme="euler", first_stream=0):
    """Observation series for realizations ``first_stream .. first_stream+n-1``.

    Paths start at ``x0`` at the first observation time and run to the last
    one. Returns an array of shape ``(n, M, r)``.
    """
    grid = PathGrid.covering(obs.times[0], obs.times[-1], delta)
    rngs = [RngStream(seed, first_stream + i) for i in range(n)]
    if scheme == "euler":
        xs = euler_paths(model, grid, x0, rngs)
        paths = [Path(grid.times, x) for x in xs]
    elif scheme == "ll":
        paths = [Path(grid.times, x) for x in ll_paths(model, grid, x0, rngs)]
    else:
        raise ConfigurationError(f"unknown path scheme {scheme!r}")
    return np.stack([observe(p, obs, r).z for p, r in zip(paths, rngs)])
