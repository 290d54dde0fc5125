"""Lockstep engine that runs one filter over many observation series at once.

The arithmetic is that of :mod:`.moments`, :mod:`.filter` and
:mod:`.adaptive`, with a leading realization axis on every array, so the
per-node Python overhead is paid once per batch instead of once per
realization. Realizations keep their own adaptive step sizes; the batch
simply iterates until every member has reached the next observation time.

A realization that diverges (non-finite moments, lost positive
semi-definiteness, failure at the minimum step) is marked dead and carried
as NaN; the others are unaffected.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .adaptive import AdaptiveConfig, initial_stepsize
from .errors import ConfigurationError, LLFilterError, ModelError
from .filter import FilterRun, _interval_nodes
from .linalg import solve_gain
from .moments import MomentState

__all__ = ["BatchRun", "run_batch", "run_exact_batch", "linearize_batch", "build_augmented_batch"]


def _eval(model, name, t, x, tail):
    fun = getattr(model, name)
    n = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    if model.vectorized:
        out = np.asarray(fun(t, x), dtype=float)
        if out.shape != (n,) + tail:
            raise ModelError(f"vectorized {name} returned shape {out.shape}, expected {(n,) + tail}")
        return out
    return np.stack([np.asarray(fun(ti, xi), dtype=float).reshape(tail) for ti, xi in zip(t, x)])


@dataclass
class _Lin:
    a_mat: np.ndarray
    b_mats: np.ndarray
    a0: np.ndarray
    a1: np.ndarray
    b0: np.ndarray
    b1: np.ndarray
    bad: np.ndarray


def linearize_batch(model, s, y, beta=1):
    """Batched :func:`.wll.linearize`; non-finite members are flagged in ``bad``."""
    if beta not in (1, 2):
        raise ConfigurationError(f"beta must be 1 or 2, got {beta!r}")
    if beta == 2 and not model.has_hessians:
        raise ConfigurationError("beta=2 needs drift and diffusion Hessians on the model")
    d, m = model.dim, model.n_noise
    with np.errstate(all="ignore"):
        f = _eval(model, "drift", s, y, (d,))
        G = _eval(model, "diffusion", s, y, (d, m))
        A = _eval(model, "drift_jac", s, y, (d, d))
        B = _eval(model, "diffusion_jac", s, y, (m, d, d))
        ft = _eval(model, "drift_dt", s, y, (d,))
        Gt = _eval(model, "diffusion_dt", s, y, (d, m))
        a0 = f - np.einsum("nij,nj->ni", A, y)
        a1 = ft
        b0 = np.swapaxes(G, 1, 2) - np.einsum("nmij,nj->nmi", B, y)
        b1 = np.swapaxes(Gt, 1, 2)
        if beta == 2:
            GG = G @ np.swapaxes(G, 1, 2)
            a1 = a1 + 0.5 * np.einsum("nkjl,njl->nk", _eval(model, "drift_hess", s, y, (d, d, d)), GG)
            b1 = b1 + 0.5 * np.einsum("nikjl,njl->nik", _eval(model, "diffusion_hess", s, y, (m, d, d, d)), GG)
    parts = (A, B, a0, a1, b0, b1)
    bad = np.zeros(y.shape[0], dtype=bool)
    for arr in parts:
        bad |= ~np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1)
    if bad.any():
        for arr in parts:
            arr[bad] = 0.0
    return _Lin(A, B, a0, a1, b0, b1, bad)


def build_augmented_batch(lin, y, p):
    """Batched :func:`.moments.build_augmented`; returns ``(M, u)``."""
    A, B = lin.a_mat, lin.b_mats
    n, d = y.shape
    dd = d * d
    N = dd + 2 * d + 7
    eye = np.eye(d)

    acal = (A[:, :, None, :, None] * eye[None, None, :, None, :]
            + eye[None, :, None, :, None] * A[:, None, :, None, :]).reshape(n, dd, dd)
    acal += np.einsum("nmij,nmkl->nikjl", B, B).reshape(n, dd, dd)

    def vks(v):
        return (v[:, :, None, None] * eye[None, None] + eye[None, :, None, :] * v[:, None, :, None]).reshape(n, dd, d)

    def bil(c):
        out = np.einsum("nmi,nmkl->nikl", c, B) + np.einsum("nmil,nmk->nikl", B, c)
        return out.reshape(n, dd, d)

    beta4 = vks(lin.a0) + bil(lin.b0)
    beta5 = vks(lin.a1) + bil(lin.b1)
    b0t, b1t = np.swapaxes(lin.b0, 1, 2), np.swapaxes(lin.b1, 1, 2)
    beta1 = b0t @ lin.b0
    beta2 = b0t @ lin.b1 + b1t @ lin.b0
    beta3 = b1t @ lin.b1

    w2 = dd
    w3 = dd + d + 2
    s0, s1, s2 = N - 3, N - 2, N - 1
    M = np.zeros((n, N, N))
    M[:, :dd, :dd] = acal
    M[:, :dd, w2:w2 + d] = beta5
    M[:, :dd, w3:w3 + d] = beta4
    M[:, :dd, s0] = np.swapaxes(beta3, 1, 2).reshape(n, dd)
    M[:, :dd, s1] = np.swapaxes(beta2, 1, 2).reshape(n, dd) + np.einsum("nij,nj->ni", beta5, y)
    M[:, :dd, s2] = np.swapaxes(beta1, 1, 2).reshape(n, dd) + np.einsum("nij,nj->ni", beta4, y)
    for off in (w2, w3):
        M[:, off:off + d, off:off + d] = A
        M[:, off:off + d, off + d] = lin.a1
        M[:, off:off + d, off + d + 1] = np.einsum("nij,nj->ni", A, y) + lin.a0
        M[:, off + d, off + d + 1] = 1.0
    idx = np.arange(d + 2)
    M[:, w2 + idx, w3 + idx] = 1.0
    M[:, s0, s1] = 2.0
    M[:, s1, s2] = 1.0

    u = np.zeros((n, N))
    u[:, :dd] = np.swapaxes(p, 1, 2).reshape(n, dd)
    u[:, w3 + d + 1] = 1.0
    u[:, s2] = 1.0
    return M, u


def _expm(M, h):
    """Batched ``e^{M h}``; members with a non-finite result are flagged."""
    a = M * h[:, None, None]
    ok = np.isfinite(a).all(axis=(1, 2))
    a[~ok] = 0.0
    with np.errstate(all="ignore"):
        phi = scipy.linalg.expm(a)
    ok &= np.isfinite(phi).all(axis=(1, 2))
    return phi, ~ok


def _read(phi_u, y, d):
    n = y.shape[0]
    dd = d * d
    start = dd + d + 2
    y_new = y + phi_u[:, start:start + d]
    p = np.swapaxes(phi_u[:, :dd].reshape(n, d, d), 1, 2)
    return y_new, 0.5 * (p + np.swapaxes(p, 1, 2))


@np.errstate(over="ignore", invalid="ignore")
def _variance(y, p):
    v = p - y[:, :, None] * y[:, None, :]
    return 0.5 * (v + np.swapaxes(v, 1, 2))


def _bad_moments(y, p):
    """Batched :func:`.moments.check_moments`; returns the failure mask."""
    finite = np.isfinite(y).all(axis=1) & np.isfinite(p).all(axis=(1, 2))
    bad = ~finite
    if finite.any():
        v = _variance(y[finite], p[finite])
        tr = np.abs(np.trace(v, axis1=1, axis2=2))
        tol = 1e-8 * tr + 1e-12 * (1.0 + np.abs(p[finite]).max(axis=(1, 2)))
        bad[finite] = np.linalg.eigvalsh(v).min(axis=1) < -tol
    return bad


def _moment_step(model, t, y, p, h, beta):
    """One frozen-linearization step for every member; returns ``(y, p, phi, u, bad)``."""
    lin = linearize_batch(model, t, y, beta)
    M, u = build_augmented_batch(lin, y, p)
    phi, bad = _expm(M, h)
    y_new, p_new = _read(np.einsum("nij,nj->ni", phi, u), y, y.shape[1])
    return y_new, p_new, phi, u, bad | lin.bad


@dataclass
class BatchRun:
    """Filter output for ``n`` realizations over ``K`` observation intervals.

    Dead realizations (``alive[i]`` false) hold NaN from the interval where
    they failed onward; ``failure[i]`` names the reason.
    """

    t: np.ndarray
    y_pred: np.ndarray
    v_pred: np.ndarray
    y_filt: np.ndarray
    v_filt: np.ndarray
    gain: np.ndarray
    innovation: np.ndarray
    accepted_steps: np.ndarray
    failed_steps: np.ndarray
    alive: np.ndarray
    failure: list
    label: str = ""

    @property
    def n_realizations(self):
        return self.y_pred.shape[0]

    def run(self, i):
        """The :class:`FilterRun` of realization ``i``."""
        p_pred = self.v_pred[i] + self.y_pred[i][:, :, None] * self.y_pred[i][:, None, :]
        return FilterRun(
            t=self.t.copy(),
            y_pred=self.y_pred[i].copy(),
            p_pred=p_pred,
            v_pred=self.v_pred[i].copy(),
            y_filt=self.y_filt[i].copy(),
            v_filt=self.v_filt[i].copy(),
            gain=self.gain[i].copy(),
            innovation=self.innovation[i].copy(),
            accepted_steps=self.accepted_steps[i].copy(),
            failed_steps=self.failed_steps[i].copy(),
            label=self.label,
        )


# diverged members overflow here; they are flagged through ``bad``
@np.errstate(over="ignore", invalid="ignore")
def _update(y, p, z, obs, t):
    """Batched :func:`.filter.update`; returns ``(y, p, gain, innovation, bad)``."""
    c = obs.c
    v = _variance(y, p)
    vc = v @ c.T
    s = c @ vc + obs.sigma_at(t)
    s = 0.5 * (s + np.swapaxes(s, 1, 2))
    n, d = y.shape
    r = c.shape[0]
    gain = np.full((n, d, r), np.nan)
    bad = np.zeros(n, dtype=bool)
    try:
        gain = np.swapaxes(np.linalg.solve(s, np.swapaxes(vc, 1, 2)), 1, 2)
    except np.linalg.LinAlgError:
        for i in range(n):
            try:
                gain[i] = solve_gain(v[i], c, obs.sigma_at(t))
            except LLFilterError:
                bad[i] = True
    innov = z - y @ c.T
    y_new = y + np.einsum("ndr,nr->nd", gain, innov)
    v_new = v - gain @ c @ v
    v_new = 0.5 * (v_new + np.swapaxes(v_new, 1, 2))
    bad |= ~np.isfinite(y_new).all(axis=1)
    return y_new, v_new + y_new[:, :, None] * y_new[:, None, :], gain, innov, bad


def _predict_fixed(model, y, p, t_k, nodes, beta):
    bad = np.zeros(y.shape[0], dtype=bool)
    for tau, tau_next in zip(nodes[:-1], nodes[1:]):
        h = np.full(y.shape[0], tau_next - tau)
        y, p, _, _, b = _moment_step(model, tau, y, p, h, beta)
        bad |= b
        bad |= _bad_moments(y, p)
        if bad.any():
            y[bad] = np.nan
            p[bad] = np.nan
    return y, p, bad


def _scaled_rms(diff, sc):
    return np.sqrt(np.mean((diff / sc) ** 2, axis=1))


def _factor(e, beta):
    with np.errstate(divide="ignore", over="ignore"):
        inv = np.where(e > 0, 1.0 / np.where(e > 0, e, 1.0), np.inf) ** (1.0 / (beta + 1))
    grow = np.where(e == 0, 5.0, np.minimum(5.0, np.maximum(0.25, 0.8 * inv)))
    shrink = np.minimum(1.0, np.maximum(0.1, 0.2 * inv))
    return np.where(e <= 1.0, grow, shrink)


def _adaptive_predict(model, y, p, t_k, t_k1, cfg, beta, h):
    """Lockstep version of :func:`.adaptive.adaptive_predict`.

    Returns ``(y, p, h_next, accepted, failed, bad, reasons)``.
    """
    n, d = y.shape
    h_max = cfg.h_max if cfg.h_max is not None else (t_k1 - t_k) / 2.0
    end_tol = 4.0 * cfg.prs * max(abs(t_k1), 1.0)
    tau = np.full(n, float(t_k))
    h = h.copy()
    y, p = y.copy(), p.copy()
    done = ~np.isfinite(y).all(axis=1)
    bad = done.copy()
    reasons = {}
    accepted = np.zeros(n, dtype=int)
    failed = np.zeros(n, dtype=int)
    while True:
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        over = accepted[act] + failed[act] >= cfg.max_steps
        if over.any():
            for i in act[over]:
                reasons[i] = f"step budget exhausted before t={t_k1}"
            bad[act[over]] = done[act[over]] = True
            act = act[~over]
            if act.size == 0:
                break
        ta, ya, pa = tau[act], y[act], p[act]
        half = (t_k1 - ta) / 2.0
        hh = np.minimum(np.minimum(h[act], h_max), half)
        at_floor = (hh <= cfg.h_min * (1.0 + 1e-12)) | ((hh == half) & (half < cfg.h_min))

        lin0 = linearize_batch(model, ta, ya, beta)
        M0, u0 = build_augmented_batch(lin0, ya, pa)
        phi, b0 = _expm(M0, hh)
        ym, pm = _read(np.einsum("nij,nj->ni", phi, u0), ya, d)
        yf, pf, _, _, b1 = _moment_step(model, ta + hh, np.nan_to_num(ym), np.nan_to_num(pm), hh, beta)
        yc, pc = _read(np.einsum("nij,nj->ni", phi @ phi, u0), ya, d)
        fail_eval = lin0.bad | b0 | b1 | ~np.isfinite(ym).all(axis=1)

        sc_y = cfg.atol_y + cfg.rtol_y * np.maximum(np.abs(ya), np.abs(yf))
        vp = lambda a: np.swapaxes(a, 1, 2).reshape(a.shape[0], -1)
        sc_p = cfg.atol_P + cfg.rtol_P * np.maximum(np.abs(vp(pa)), np.abs(vp(pf)))
        with np.errstate(all="ignore"):
            e1 = _scaled_rms(yf - yc, sc_y)
            e2 = _scaled_rms(vp(pf) - vp(pc), sc_p)
        fail_eval |= ~(np.isfinite(e1) & np.isfinite(e2))
        e1[fail_eval] = np.inf
        e2[fail_eval] = np.inf

        dead = fail_eval & at_floor
        if dead.any():
            for i, t in zip(act[dead], ta[dead]):
                reasons[i] = f"step failed at minimum step size, t={t}"
            bad[act[dead]] = done[act[dead]] = True

        h_new = np.maximum(
            cfg.h_min,
            np.minimum(hh * _factor(np.minimum(e1, 1e300), beta), hh * _factor(np.minimum(e2, 1e300), beta)),
        )
        ok = ~fail_eval & ((np.maximum(e1, e2) <= 1.0) | at_floor)
        accepted[act[ok]] += 1
        failed[act[~ok & ~dead]] += 1
        keep = ~dead
        h[act[keep]] = h_new[keep]

        if ok.any():
            ia = act[ok]
            tau_new = ta[ok] + 2.0 * hh[ok]
            last = (hh[ok] == half[ok]) | (np.abs(tau_new - t_k1) <= end_tol)
            tau_new[last] = t_k1
            tau[ia] = tau_new
            y[ia], p[ia] = yf[ok], pf[ok]
            lost = _bad_moments(yf[ok], pf[ok])
            for i, t in zip(ia[lost], tau_new[lost]):
                reasons[i] = f"prediction variance lost positive semi-definiteness at t={t}"
            bad[ia[lost]] = True
            done[ia[last | lost]] = True
    y[bad] = np.nan
    p[bad] = np.nan
    return y, p, h, accepted, failed, bad, reasons


def run_batch(model, obs, data, x0, q0, grid="conventional", beta=1, cfg=None, update_at_t0=False, label=None):
    """Run one filter on ``n`` observation series.

    Parameters
    ----------
    data : (n, M, r) array
        One observation series per realization.
    grid : "conventional", "adaptive", float or callable
        As in :func:`.filter.run_ll_filter`; ``"adaptive"`` runs the
        adaptive filter with ``cfg``.
    """
    z = np.asarray(data, dtype=float)
    if z.ndim == 2:
        z = z[:, :, None]
    n = z.shape[0]
    if z.shape[1:] != (obs.times.size, obs.dim_obs):
        raise ValueError(f"data has shape {z.shape}, expected (n, {obs.times.size}, {obs.dim_obs})")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    q0 = np.atleast_2d(np.asarray(q0, dtype=float))
    d = x0.size
    times = obs.times
    K = times.size - 1
    adaptive = isinstance(grid, str) and grid == "adaptive"
    if adaptive:
        cfg = cfg or AdaptiveConfig()

    y = np.repeat(x0[None], n, axis=0)
    p = np.repeat(0.5 * (q0 + q0.T)[None], n, axis=0)
    alive = np.ones(n, dtype=bool)
    failure = [None] * n

    def kill(mask, reason):
        for i in np.flatnonzero(mask & alive):
            failure[i] = reason(i) if callable(reason) else reason
        alive[mask] = False

    if update_at_t0:
        y, p, _, _, b = _update(y, p, z[:, 0], obs, times[0])
        kill(b, f"singular innovation covariance at t={times[0]}")

    out = {
        "y_pred": np.full((n, K, d), np.nan),
        "v_pred": np.full((n, K, d, d), np.nan),
        "y_filt": np.full((n, K, d), np.nan),
        "v_filt": np.full((n, K, d, d), np.nan),
        "gain": np.full((n, K, d, obs.dim_obs), np.nan),
        "innovation": np.full((n, K, obs.dim_obs), np.nan),
    }
    accepted = np.zeros((n, K), dtype=int)
    failed = np.zeros((n, K), dtype=int)
    h = None
    if adaptive:
        h = np.empty(n)
        for i in range(n):
            h[i] = initial_stepsize(model, MomentState(times[0], y[i], p[i]), cfg, times[0], times[1], beta)

    for k in range(K):
        live = np.flatnonzero(alive)
        if live.size == 0:
            break
        if adaptive:
            yp, pp, h_live, acc, fl, b, reasons = _adaptive_predict(
                model, y[live], p[live], times[k], times[k + 1], cfg, beta, h[live]
            )
            h[live] = h_live
            accepted[live, k] = acc
            failed[live, k] = fl
            mask = np.zeros(n, dtype=bool)
            mask[live[b]] = True
            named = {int(live[j]): msg for j, msg in reasons.items()}
            kill(mask, lambda i: named.get(int(i), "divergence"))
        else:
            nodes = _interval_nodes(grid, times[k], times[k + 1])
            yp, pp, b = _predict_fixed(model, y[live], p[live], times[k], nodes, beta)
            accepted[live, k] = nodes.size - 1
            mask = np.zeros(n, dtype=bool)
            mask[live[b]] = True
            kill(mask, f"divergence in prediction to t={times[k + 1]}")
        ok = ~b
        live_ok = live[ok]
        out["y_pred"][live_ok, k] = yp[ok]
        out["v_pred"][live_ok, k] = _variance(yp[ok], pp[ok])
        yf, pf, gain, innov, bu = _update(yp[ok], pp[ok], z[live_ok, k + 1], obs, times[k + 1])
        mask = np.zeros(n, dtype=bool)
        mask[live_ok[bu]] = True
        kill(mask, f"singular innovation covariance at t={times[k + 1]}")
        good = ~bu
        out["y_filt"][live_ok[good], k] = yf[good]
        out["v_filt"][live_ok[good], k] = _variance(yf[good], pf[good])
        out["gain"][live_ok[good], k] = gain[good]
        out["innovation"][live_ok[good], k] = innov[good]
        y[live_ok] = yf
        p[live_ok] = pf

    if label is None:
        label = "adaptive" if adaptive else f"ll[{grid}]"
    return BatchRun(
        t=times[1:].copy(),
        accepted_steps=accepted,
        failed_steps=failed,
        alive=alive,
        failure=failure,
        label=label,
        **out,
    )


def run_exact_batch(spec, data, update_at_t0=False):
    """Closed-form LMV filter for Examples 1 and 2 over ``n`` series."""
    from .filter import exact_predict_example1, exact_predict_example2

    if spec.name not in ("ex1", "ex2"):
        raise ConfigurationError(f"no closed-form LMV filter for {spec.name!r}")
    obs, par = spec.observation, spec.params
    z = np.asarray(data, dtype=float)
    if z.ndim == 2:
        z = z[:, :, None]
    n = z.shape[0]
    times = obs.times
    K = times.size - 1
    y = np.repeat(spec.x0[None], n, axis=0)
    p = np.repeat(spec.q0[None], n, axis=0)
    if update_at_t0:
        y, p, _, _, _ = _update(y, p, z[:, 0], obs, times[0])
    out = {key: np.full((n, K) + tail, np.nan) for key, tail in (
        ("y_pred", (1,)), ("v_pred", (1, 1)), ("y_filt", (1,)), ("v_filt", (1, 1)),
        ("gain", (1, 1)), ("innovation", (1,)))}
    alive = np.ones(n, dtype=bool)
    failure = [None] * n
    for k in range(K):
        x, q = y[:, 0], p[:, 0, 0]
        if spec.name == "ex1":
            xp, qp = exact_predict_example1(x, q, times[k], times[k + 1], par["a"], par["sigma"])
        else:
            xp, qp = exact_predict_example2(
                x, q, times[k], times[k + 1], par["a"], par["p"], par["sigma1"], par["sigma2"]
            )
        yp, pp = xp[:, None], qp[:, None, None]
        bad = _bad_moments(yp, pp) | ~alive
        for i in np.flatnonzero(bad & alive):
            failure[i] = f"exact prediction invalid at t={times[k + 1]}"
        alive &= ~bad
        out["y_pred"][alive, k] = yp[alive]
        out["v_pred"][alive, k] = _variance(yp[alive], pp[alive])
        yf, pf, gain, innov, bu = _update(yp[alive], pp[alive], z[alive, k + 1], obs, times[k + 1])
        idx = np.flatnonzero(alive)
        out["y_filt"][idx, k] = yf
        out["v_filt"][idx, k] = _variance(yf, pf)
        out["gain"][idx, k] = gain
        out["innovation"][idx, k] = innov
        y[idx], p[idx] = yf, pf
        for i in idx[bu]:
            failure[i] = f"singular innovation covariance at t={times[k + 1]}"
        alive[idx[bu]] = False
    zeros = np.zeros((n, K), dtype=int)
    return BatchRun(t=times[1:].copy(), accepted_steps=zeros, failed_steps=zeros.copy(),
                    alive=alive, failure=failure, label="exact", **out)
