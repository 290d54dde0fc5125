"""Adaptive construction of the time discretization between observations.

Local errors are estimated by step doubling: two steps of size ``h`` (the
second relinearized at the midpoint) against one step of size ``2h`` with
the first linearization. Since both share ``e^{hM}``, the coarse step costs
a matrix product instead of a second exponential. Each accepted iteration
advances the current time by ``2h``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .errors import ConfigurationError, DivergenceError, ExpmError
from .filter import _check_data, _initial_state, _Recorder, update
from .moments import apply_flow, build_augmented, check_moments, flow
from .wll import linearize

__all__ = [
    "AdaptiveConfig",
    "StepRecord",
    "initial_stepsize",
    "double_step",
    "step_errors",
    "propose_stepsize",
    "adaptive_predict",
    "run_adaptive_filter",
]

MACHINE_EPS = float(np.finfo(float).eps)


@dataclass(frozen=True)
class AdaptiveConfig:
    """Tolerances and step bounds for the adaptive predictor.

    ``h_max=None`` means half of each observation interval, so that one
    double step can span it.
    """

    rtol_y: float = 1e-6
    atol_y: float = 1e-6
    rtol_P: float = 1e-6
    atol_P: float = 1e-9
    h_min: float = 1e-8
    h_max: float | None = None
    prs: float = MACHINE_EPS
    max_steps: int = 1_000_000

    def __post_init__(self):
        for name in ("rtol_y", "atol_y", "rtol_P", "atol_P", "h_min", "prs"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.h_max is not None and not self.h_max >= self.h_min:
            raise ConfigurationError("need 0 < h_min <= h_max")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown adaptive settings: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class StepRecord:
    tau: float
    h: float
    e1: float
    e2: float
    accepted: bool
    h_new: float


def _scaled_norm(v, sc):
    return float(np.sqrt(np.mean((v / sc) ** 2)))


def initial_stepsize(model, state, cfg, t0, t1, beta=1):
    """Starting step ``h_1`` from the size of the moments and their derivatives.

    ``F`` is the right-hand side of the (frozen) linearized moment equations
    at ``t0``; its first and second time derivatives along the flow are
    ``M u`` and ``M^2 u`` of the augmented system.
    """
    if not t1 > t0:
        raise ValueError("need t1 > t0")
    lin = linearize(model, t0, state.y, beta)
    aug = build_augmented(lin, state)
    mu = aug.m_mat @ aug.u_vec
    m2u = aug.m_mat @ mu
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(m2u))):
        raise DivergenceError(f"non-finite moment derivatives at t={t0}", time=t0)

    def delta(v0, f1, f2, rtol, atol):
        sc = atol + rtol * np.abs(v0)
        d0 = _scaled_norm(v0, sc)
        d1 = _scaled_norm(f1, sc)
        d2 = _scaled_norm(f2, sc)
        if d0 < 10 * atol or d1 < 10 * atol:
            delta1 = atol
        else:
            delta1 = 0.01 * d0 / d1
        big = max(d1, d2)
        if big <= cfg.prs:
            delta2 = max(atol, delta1 * rtol)
        else:
            delta2 = (0.01 / big) ** (1.0 / (beta + 1))
        return min(100 * delta1, delta2)

    dy = delta(state.y, mu[aug.mean_slice], m2u[aug.mean_slice], cfg.rtol_y, cfg.atol_y)
    ps = aug.p_slice
    dp = delta(aug.u_vec[ps], mu[ps], m2u[ps], cfg.rtol_P, cfg.atol_P)
    return max(cfg.h_min, min(dy, dp, t1 - t0))


def double_step(model, lin, state, h, beta=1):
    """Fine (two steps of ``h``) and coarse (one step of ``2h``) estimates.

    ``lin`` is the linearization at ``state``; the fine path relinearizes at
    the intermediate mean.
    """
    if not h > 0:
        raise ValueError("step must be positive")
    aug0 = build_augmented(lin, state)
    phi = flow(aug0, h)
    t_end = state.t + 2 * h
    mid = apply_flow(aug0, phi, state, state.t + h)
    lin_mid = linearize(model, mid.t, mid.y, beta)
    aug1 = build_augmented(lin_mid, mid)
    fine = apply_flow(aug1, flow(aug1, h), mid, t_end)
    coarse = apply_flow(aug0, phi @ phi, state, t_end)
    return fine, coarse


def step_errors(fine, coarse, prev, cfg):
    """Scaled RMS differences ``(E1, E2)`` for the mean and second moment."""
    sc_y = cfg.atol_y + cfg.rtol_y * np.maximum(np.abs(prev.y), np.abs(fine.y))
    e1 = _scaled_norm(fine.y - coarse.y, sc_y)
    p_prev, p_fine, p_coarse = (s.p.reshape(-1, order="F") for s in (prev, fine, coarse))
    sc_p = cfg.atol_P + cfg.rtol_P * np.maximum(np.abs(p_prev), np.abs(p_fine))
    e2 = _scaled_norm(p_fine - p_coarse, sc_p)
    return e1, e2


def _factor(e, beta):
    if e <= 1.0:
        if e == 0.0:
            return 5.0
        return min(5.0, max(0.25, 0.8 * (1.0 / e) ** (1.0 / (beta + 1))))
    return min(1.0, max(0.1, 0.2 * (1.0 / e) ** (1.0 / (beta + 1))))


def propose_stepsize(e1, e2, h, cfg, beta=1):
    if e1 < 0 or e2 < 0:
        raise ValueError("error norms must be non-negative")
    return max(cfg.h_min, min(h * _factor(e1, beta), h * _factor(e2, beta)))


def adaptive_predict(model, state, t_k, t_k1, cfg, beta=1, h_carry=None):
    """Adaptive prediction from ``t_k`` to ``t_k1``.

    Returns ``(MomentState, variance, records, h_next)`` where ``h_next`` is
    the step proposed after the last accepted step, to seed the next
    interval.
    """
    if not t_k1 > t_k:
        raise ValueError("need t_k1 > t_k")
    if state.t != t_k:
        raise ValueError("state time must equal t_k")
    h_max = cfg.h_max if cfg.h_max is not None else (t_k1 - t_k) / 2.0
    h = initial_stepsize(model, state, cfg, t_k, t_k1, beta) if h_carry is None else h_carry
    end_tol = 4.0 * cfg.prs * max(abs(t_k1), 1.0)
    records = []
    tau = t_k
    lin = linearize(model, tau, state.y, beta)
    h_next = h
    while True:
        if len(records) >= cfg.max_steps:
            raise DivergenceError(
                f"adaptive prediction did not reach t={t_k1} within {cfg.max_steps} steps", time=tau
            )
        half_rest = (t_k1 - tau) / 2.0
        h = min(h, h_max, half_rest)
        at_floor = h <= cfg.h_min * (1.0 + 1e-12) or h == half_rest and half_rest < cfg.h_min
        try:
            fine, coarse = double_step(model, lin, state, h, beta)
            e1, e2 = step_errors(fine, coarse, state, cfg)
            if not (np.isfinite(e1) and np.isfinite(e2)):
                raise ExpmError("non-finite step estimate")
        except (ExpmError, DivergenceError):
            if at_floor:
                raise DivergenceError(f"step failed at minimum step size, t={tau}", time=tau)
            e1 = e2 = np.inf
            fine = None
        h_new = propose_stepsize(min(e1, 1e300), min(e2, 1e300), h, cfg, beta)
        ok = fine is not None and (max(e1, e2) <= 1.0 or at_floor)
        records.append(StepRecord(tau, h, e1, e2, ok, h_new))
        if not ok:
            h = h_new
            continue
        tau_new = tau + 2.0 * h
        last = h == half_rest or abs(tau_new - t_k1) <= end_tol
        if last:
            tau_new = t_k1
        state = replace(fine, t=tau_new)
        check_moments(state, where=tau_new)
        tau = tau_new
        h_next = h_new
        h = h_new
        if last:
            break
        lin = linearize(model, tau, state.y, beta)
    return state, state.variance, records, h_next


def run_adaptive_filter(model, obs, data, x0, q0, cfg=None, beta=1, update_at_t0=False):
    """Adaptive order-``beta`` local linearization filter.

    The initial step is estimated once on the first interval; later
    intervals start from the step proposed at the end of the previous one.
    """
    cfg = cfg or AdaptiveConfig()
    z = _check_data(obs, data)
    state = _initial_state(obs, x0, q0)
    if update_at_t0:
        state, _, _ = update(state, z[0], obs)
    rec = _Recorder("adaptive")
    times = obs.times
    h_carry = None
    for k in range(times.size - 1):
        pred, _, records, h_carry = adaptive_predict(
            model, state, times[k], times[k + 1], cfg, beta, h_carry
        )
        state, gain, innov = update(pred, z[k + 1], obs)
        n_ok = sum(r.accepted for r in records)
        rec.add(pred, state, gain, innov, accepted=n_ok, failed=len(records) - n_ok)
        rec.step_records.append(records)
    return rec.finish()
