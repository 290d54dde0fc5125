"""Observation update and filter drivers.

Drivers start from ``(x0, Q0)`` at the first observation time, predict to
each following observation time and update there. ``FilterRun`` row ``k``
holds the prediction ``t_{k+1} | t_k`` and the filtered moments at
``t_{k+1}``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .benchmarks import get_example
from .errors import ConfigurationError
from .linalg import solve_gain, symmetrize
from .moments import MomentState, check_moments, predict_fixed

__all__ = [
    "FilterRun",
    "update",
    "uniform_nodes",
    "run_ll_filter",
    "exact_predict_example1",
    "exact_predict_example2",
    "run_exact_lmv_filter",
]


@dataclass
class FilterRun:
    """Per-observation record of a filter pass.

    Arrays are indexed by ``k`` (row ``k`` refers to observation time
    ``t[k] = t_{k+1}``).
    """

    t: np.ndarray
    y_pred: np.ndarray
    p_pred: np.ndarray
    v_pred: np.ndarray
    y_filt: np.ndarray
    v_filt: np.ndarray
    gain: np.ndarray
    innovation: np.ndarray
    accepted_steps: np.ndarray
    failed_steps: np.ndarray
    label: str = ""
    step_records: list = field(default_factory=list, repr=False)

    @property
    def n_steps(self):
        return len(self.t)

    def rows(self):
        """Flat rows for CSV export (header first)."""
        K, d = self.y_pred.shape
        r = self.gain.shape[2]
        header = ["k", "t"]
        header += [f"y_pred[{i}]" for i in range(d)]
        header += [f"V_pred[{i},{j}]" for i in range(d) for j in range(d)]
        header += [f"y_filt[{i}]" for i in range(d)]
        header += [f"V_filt[{i},{j}]" for i in range(d) for j in range(d)]
        header += [f"K[{i},{j}]" for i in range(d) for j in range(r)]
        header += ["accepted_steps", "failed_steps"]
        out = [header]
        for k in range(K):
            row = [k, repr(float(self.t[k]))]
            row += [repr(float(v)) for v in self.y_pred[k]]
            row += [repr(float(v)) for v in self.v_pred[k].ravel()]
            row += [repr(float(v)) for v in self.y_filt[k]]
            row += [repr(float(v)) for v in self.v_filt[k].ravel()]
            row += [repr(float(v)) for v in self.gain[k].ravel()]
            row += [int(self.accepted_steps[k]), int(self.failed_steps[k])]
            out.append(row)
        return out

    def to_csv(self, path=None):
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.rows())
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


class _Recorder:
    def __init__(self, label):
        self.label = label
        self.cols = {k: [] for k in (
            "t", "y_pred", "p_pred", "v_pred", "y_filt", "v_filt",
            "gain", "innovation", "accepted", "failed")}
        self.step_records = []

    def add(self, pred, filt, gain, innovation, accepted=1, failed=0):
        c = self.cols
        c["t"].append(pred.t)
        c["y_pred"].append(pred.y)
        c["p_pred"].append(pred.p)
        c["v_pred"].append(pred.variance)
        c["y_filt"].append(filt.y)
        c["v_filt"].append(filt.variance)
        c["gain"].append(gain)
        c["innovation"].append(innovation)
        c["accepted"].append(accepted)
        c["failed"].append(failed)

    def finish(self):
        c = self.cols
        return FilterRun(
            t=np.asarray(c["t"]),
            y_pred=np.asarray(c["y_pred"]),
            p_pred=np.asarray(c["p_pred"]),
            v_pred=np.asarray(c["v_pred"]),
            y_filt=np.asarray(c["y_filt"]),
            v_filt=np.asarray(c["v_filt"]),
            gain=np.asarray(c["gain"]),
            innovation=np.asarray(c["innovation"]),
            accepted_steps=np.asarray(c["accepted"], dtype=int),
            failed_steps=np.asarray(c["failed"], dtype=int),
            label=self.label,
            step_records=self.step_records,
        )


def update(pred, z, obs, t=None):
    """Incorporate observation ``z`` into the prediction ``pred``.

    Returns ``(filtered MomentState, gain, innovation)``.
    """
    t = pred.t if t is None else t
    c = obs.c
    v = pred.variance
    gain = solve_gain(v, c, obs.sigma_at(t))
    innovation = np.atleast_1d(np.asarray(z, dtype=float)) - c @ pred.y
    y = pred.y + gain @ innovation
    v_new = symmetrize(v - gain @ c @ v)
    return MomentState.from_variance(t, y, v_new), gain, innovation


def _check_data(obs, data):
    z = np.asarray(data, dtype=float)
    if z.ndim == 1:
        z = z.reshape(-1, 1) if obs.dim_obs == 1 else z.reshape(1, -1)
    if z.shape != (obs.times.size, obs.dim_obs):
        raise ValueError(
            f"observation series has shape {z.shape}, expected {(obs.times.size, obs.dim_obs)}"
        )
    return z


def _initial_state(obs, x0, q0):
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    q0 = np.atleast_2d(np.asarray(q0, dtype=float))
    return MomentState(float(obs.times[0]), x0, symmetrize(q0))


def uniform_nodes(t_start, t_end, h):
    """Uniform nodes with spacing at most ``h`` landing exactly on both ends."""
    n = max(1, int(np.ceil((t_end - t_start) / h * (1.0 - 1e-12))))
    nodes = np.linspace(t_start, t_end, n + 1)
    nodes[-1] = t_end
    return nodes


def _interval_nodes(grid, t_start, t_end):
    if isinstance(grid, str):
        if grid != "conventional":
            raise ConfigurationError(f"unknown grid spec {grid!r}")
        return np.array([t_start, t_end])
    if callable(grid):
        return np.asarray(grid(t_start, t_end), dtype=float)
    h = float(grid)
    if not h > 0:
        raise ConfigurationError("grid step must be positive")
    return uniform_nodes(t_start, t_end, h)


def run_ll_filter(model, obs, data, x0, q0, grid="conventional", beta=1, update_at_t0=False):
    """Order-``beta`` local linearization filter on a fixed grid.

    Parameters
    ----------
    grid : "conventional", float or callable
        ``"conventional"`` uses the observation times only; a float ``h``
        refines every interval uniformly with step at most ``h``; a callable
        ``(t_k, t_k1) -> nodes`` returns explicit nodes for each interval.
    """
    z = _check_data(obs, data)
    state = _initial_state(obs, x0, q0)
    if update_at_t0:
        state, _, _ = update(state, z[0], obs)
    rec = _Recorder(f"ll[{grid}]")
    times = obs.times
    for k in range(times.size - 1):
        nodes = _interval_nodes(grid, times[k], times[k + 1])
        pred, _ = predict_fixed(model, state, times[k + 1], nodes, beta)
        state, gain, innov = update(pred, z[k + 1], obs)
        rec.add(pred, state, gain, innov, accepted=nodes.size - 1)
    return rec.finish()


def exact_predict_example1(x, q, t_k, t_k1, a, sigma):
    """Closed-form first and second moment predictions for Example 1."""
    dt2 = t_k1 * t_k1 - t_k * t_k
    return x * np.exp(a * dt2 / 2.0), q * np.exp((a + sigma * sigma / 2.0) * dt2)


def exact_predict_example2(x, q, t_k, t_k1, a, p, sigma1, sigma2):
    """Closed-form first and second moment predictions for Example 2."""
    if a == 0:
        raise ValueError("exact Example 2 prediction has a pole at a = 0")
    dt2 = t_k1 * t_k1 - t_k * t_k
    x_pred = x * np.exp(a * dt2 / 2.0)
    c2 = sigma2 * sigma2 / (2.0 * a)
    q_pred = (
        (q + c2) * np.exp(a * dt2)
        + sigma1 * sigma1 / (2 * p + 1) * (t_k1 ** (2 * p + 1) - t_k ** (2 * p + 1)) * np.exp(a * t_k1 * t_k1)
        - c2
    )
    return x_pred, q_pred


def run_exact_lmv_filter(example, data, update_at_t0=False):
    """Exact LMV filter for Examples 1 and 2 from their closed-form predictions."""
    spec = get_example(example) if isinstance(example, str) else example
    if spec.name not in ("ex1", "ex2"):
        raise ConfigurationError(f"no closed-form LMV filter for {spec.name!r}")
    par = spec.params
    obs = spec.observation
    z = _check_data(obs, data)
    state = _initial_state(obs, spec.x0, spec.q0)
    if update_at_t0:
        state, _, _ = update(state, z[0], obs)
    rec = _Recorder("exact")
    times = obs.times
    for k in range(times.size - 1):
        x, q = float(state.y[0]), float(state.p[0, 0])
        if spec.name == "ex1":
            xp, qp = exact_predict_example1(x, q, times[k], times[k + 1], par["a"], par["sigma"])
        else:
            xp, qp = exact_predict_example2(
                x, q, times[k], times[k + 1], par["a"], par["p"], par["sigma1"], par["sigma2"]
            )
        pred = MomentState(float(times[k + 1]), np.array([xp]), np.array([[qp]]))
        check_moments(pred)
        state, gain, innov = update(pred, z[k + 1], obs)
        rec.add(pred, state, gain, innov, accepted=0)
    return rec.finish()
