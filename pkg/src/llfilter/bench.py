"""Monte Carlo error statistics for the benchmark examples.

For each realization ``i`` and observation index ``k`` four errors are
measured against a reference filter: filtered mean and variance, and
predicted mean and variance. The ``n`` values of each error are split into
``L`` batches of ``K``; the batch means give a Student-t confidence interval
and the fitted slope of ``log2(error)`` against ``log2(h)`` estimates the
order of convergence.
"""
from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.special import betainc

from .adaptive import AdaptiveConfig
from .batch import run_batch, run_exact_batch
from .benchmarks import get_example
from .errors import ConfigurationError
from .simulate import DEFAULT_DELTA, simulate_observations

__all__ = [
    "ErrorSample",
    "ConfidenceEstimate",
    "ExperimentResult",
    "student_t_quantile",
    "batch_ci",
    "fit_order",
    "error_sample",
    "run_example_experiment",
    "format_step",
    "ERROR_KINDS",
]

ERROR_KINDS = ("filter_mean", "filter_var", "pred_mean", "pred_var")


@dataclass
class ErrorSample:
    """Errors of one filter against the reference, shape ``(n, K)`` each.

    NaN marks realizations excluded because either filter diverged.
    """

    filter_mean: np.ndarray
    filter_var: np.ndarray
    pred_mean: np.ndarray
    pred_var: np.ndarray

    def __post_init__(self):
        for kind in ERROR_KINDS:
            arr = np.asarray(getattr(self, kind), dtype=float)
            if np.any(arr[np.isfinite(arr)] < 0):
                raise ValueError(f"{kind} errors must be non-negative")
            setattr(self, kind, arr)

    @property
    def valid(self):
        """Realizations with finite errors at every observation."""
        ok = np.ones(self.filter_mean.shape[0], dtype=bool)
        for kind in ERROR_KINDS:
            ok &= np.isfinite(getattr(self, kind)).all(axis=1)
        return ok


@dataclass(frozen=True)
class ConfidenceEstimate:
    mean: float
    delta: float
    variance: float
    quantile: float
    L: int
    K: int
    alpha: float


def student_t_quantile(p, dof):
    """Inverse CDF of Student's t with ``dof`` degrees of freedom.

    The CDF is written with the regularized incomplete beta function and
    inverted by Brent's method.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    if not dof >= 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {dof}")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -student_t_quantile(1.0 - p, dof)
    target = 1.0 - p  # upper tail

    def tail(t):
        return 0.5 * betainc(0.5 * dof, 0.5, dof / (dof + t * t)) - target

    hi = 1.0
    while tail(hi) > 0:
        hi *= 2.0
        if hi > 1e300:
            raise ValueError("quantile out of floating-point range")
    return brentq(tail, 0.0, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)


def batch_ci(errors, L, K, alpha=0.1):
    """Batch-means estimate and Student-t half width of ``L*K`` errors."""
    e = np.asarray(errors, dtype=float).ravel()
    if L < 2 or K < 1:
        raise ValueError("need L >= 2 batches of K >= 1 errors")
    if e.size != L * K:
        raise ValueError(f"expected L*K = {L * K} errors, got {e.size}")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    batch_means = e.reshape(L, K).mean(axis=1)
    mean = float(batch_means.mean())
    var = float(np.sum((batch_means - mean) ** 2) / (L - 1))
    q = student_t_quantile(1.0 - alpha / 2.0, L - 1)
    return ConfidenceEstimate(mean, float(q * np.sqrt(var / L)), var, float(q), int(L), int(K), float(alpha))


def fit_order(hs, errs):
    """Least-squares slope of ``log2(err)`` against ``log2(h)``."""
    hs = np.asarray(hs, dtype=float)
    errs = np.asarray(errs, dtype=float)
    if hs.shape != errs.shape or hs.size < 2:
        raise ValueError("need at least two (h, error) pairs")
    if np.any(hs <= 0) or np.any(errs <= 0) or not np.all(np.isfinite(errs)):
        raise ValueError("step sizes and errors must be positive and finite")
    if np.unique(hs).size < 2:
        raise ValueError("need at least two distinct step sizes")
    return float(np.polyfit(np.log2(hs), np.log2(errs), 1)[0])


def _err_norm(a, b):
    diff = a - b
    return np.sqrt(np.sum(diff.reshape(diff.shape[0], diff.shape[1], -1) ** 2, axis=2))


def error_sample(reference, approx):
    """Frobenius-norm errors of ``approx`` against ``reference`` (both batch runs)."""
    return ErrorSample(
        filter_mean=_err_norm(approx.y_filt, reference.y_filt),
        filter_var=_err_norm(approx.v_filt, reference.v_filt),
        pred_mean=_err_norm(approx.y_pred, reference.y_pred),
        pred_var=_err_norm(approx.v_pred, reference.v_pred),
    )


def format_step(h):
    """``1/64`` style label for a step size."""
    f = Fraction(h).limit_denominator(1 << 20)
    if abs(float(f) - float(h)) <= 1e-15 * abs(float(h)):
        return str(f)
    return repr(float(h))


def _row_label(kind, k):
    return f"t{k + 1}/t{k + 1}" if kind.startswith("filter") else f"t{k + 1}/t{k}"


@dataclass
class ExperimentResult:
    """Tables and metadata of one experiment.

    ``tables`` maps each error kind to rows ``(row_label, variant, mean,
    delta, beta_hat)``; ``estimates[kind][variant][k]`` holds the
    :class:`ConfidenceEstimate` objects and ``orders[kind][k]`` the fitted
    order across the fixed step sizes.
    """

    example: str
    variants: list
    hs: list
    estimates: dict
    orders: dict
    steps: dict
    summary: dict
    samples: dict = field(default_factory=dict, repr=False)

    def table_rows(self, kind):
        rows = [("row_label", "variant", "mean", "delta", "beta_hat")]
        n_rows = len(next(iter(self.estimates[kind].values())))
        for k in range(n_rows):
            label = _row_label(kind, k)
            for v in self.variants:
                ci = self.estimates[kind][v][k]
                beta = self.orders[kind][k] if v.startswith("h=") else None
                rows.append((
                    label,
                    v,
                    "" if ci is None else repr(ci.mean),
                    "" if ci is None else repr(ci.delta),
                    "" if beta is None or not np.isfinite(beta) else repr(beta),
                ))
        return rows

    def step_rows(self):
        rows = [("row_label", "variant", "accepted_mean", "failed_mean")]
        for v, (acc, fail) in self.steps.items():
            for k in range(len(acc)):
                rows.append((f"t{k + 1}/t{k}", v, repr(float(acc[k])), repr(float(fail[k]))))
        return rows

    def to_csv(self, kind):
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.table_rows(kind))
        return buf.getvalue()

    def write(self, out_dir):
        """Write one CSV per error kind, ``steps.csv`` and ``summary.json``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for kind in ERROR_KINDS:
            p = out / f"{self.example}_{kind}.csv"
            p.write_text(self.to_csv(kind))
            paths.append(p)
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.step_rows())
        p = out / f"{self.example}_steps.csv"
        p.write_text(buf.getvalue())
        paths.append(p)
        p = out / f"{self.example}_summary.json"
        p.write_text(json.dumps(self.summary, indent=2, sort_keys=True) + "\n")
        paths.append(p)
        return paths


def _chunk_runs(task):
    """Worker body: simulate one chunk of realizations and run every filter on it."""
    spec = get_example(task["example"], task["params"])
    z = simulate_observations(
        spec.model, spec.observation, spec.x0, task["count"], task["seed"],
        delta=task["delta"], scheme=task["scheme"], first_stream=task["first"],
    )
    cfg = AdaptiveConfig.from_dict(task["cfg"])
    beta = task["beta"]
    if spec.has_exact_filter:
        ref = run_exact_batch(spec, z)
    else:
        ref = run_batch(spec.model, spec.observation, z, spec.x0, spec.q0, grid="adaptive",
                        cfg=AdaptiveConfig(**spec.reference_tolerances), beta=beta)
    runs = {"conventional": run_batch(spec.model, spec.observation, z, spec.x0, spec.q0, beta=beta)}
    for h in task["hs"]:
        runs[f"h={format_step(h)}"] = run_batch(spec.model, spec.observation, z, spec.x0, spec.q0,
                                                grid=float(h), beta=beta)
    if task["adaptive"]:
        runs["adaptive"] = run_batch(spec.model, spec.observation, z, spec.x0, spec.q0,
                                     grid="adaptive", cfg=cfg, beta=beta)
    result = {}
    for name, run in runs.items():
        s = error_sample(ref, run)
        result[name] = (
            {kind: getattr(s, kind) for kind in ERROR_KINDS},
            run.accepted_steps,
            run.failed_steps,
        )
    return result


def run_example_experiment(
    example,
    n_realizations=200,
    hs=(1 / 16, 1 / 32, 1 / 64, 1 / 128),
    cfg=None,
    seed=0,
    L=20,
    K=None,
    alpha=0.1,
    delta=DEFAULT_DELTA,
    scheme="euler",
    beta=1,
    params=None,
    adaptive=True,
    workers=1,
    chunk_size=50,
):
    """Error tables for one benchmark example.

    Simulates ``n_realizations`` observation series and compares the
    conventional LL filter, the LL filter on each step size in ``hs`` and
    (if ``adaptive``) the adaptive LL filter with ``cfg`` against the
    reference: the exact LMV filter for ``ex1``/``ex2`` and the adaptive
    filter at the example's reference tolerances for ``ex3``/``ex4``.

    A realization where a filter diverges is dropped from that filter's
    statistics only (pairwise with the reference) and counted in the
    summary. ``K`` defaults to ``n_valid // L``; when given, the first
    ``L*K`` valid realizations (by index) are used.
    """
    spec = get_example(example, params)
    cfg = cfg or AdaptiveConfig()
    hs = sorted((float(h) for h in hs), reverse=True)
    if any(h <= 0 for h in hs):
        raise ConfigurationError("step sizes must be positive")
    if n_realizations < L:
        raise ConfigurationError(f"need at least L={L} realizations")
    t_start = time.perf_counter()

    bounds = list(range(0, n_realizations, chunk_size)) + [n_realizations]
    tasks = [
        dict(example=example, params=params or {}, count=b - a, first=a, seed=seed, delta=delta,
             scheme=scheme, cfg=cfg.to_dict(), beta=beta, hs=hs, adaptive=adaptive)
        for a, b in zip(bounds[:-1], bounds[1:])
    ]
    if workers is not None and workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_chunk_runs, tasks))
    else:
        chunks = [_chunk_runs(t) for t in tasks]

    variants = ["conventional"] + [f"h={format_step(h)}" for h in hs] + (["adaptive"] if adaptive else [])
    samples, steps, excluded, used_K = {}, {}, {}, {}
    for v in variants:
        errs = {kind: np.concatenate([c[v][0][kind] for c in chunks]) for kind in ERROR_KINDS}
        samples[v] = ErrorSample(**errs)
        acc = np.concatenate([c[v][1] for c in chunks])
        fail = np.concatenate([c[v][2] for c in chunks])
        ok = samples[v].valid
        steps[v] = (acc[ok].mean(axis=0), fail[ok].mean(axis=0))
        excluded[v] = int((~ok).sum())

    estimates = {kind: {} for kind in ERROR_KINDS}
    for v in variants:
        ok = np.flatnonzero(samples[v].valid)
        k_batch = K if K is not None else ok.size // L
        used_K[v] = k_batch
        for kind in ERROR_KINDS:
            e = getattr(samples[v], kind)
            if k_batch < 1 or ok.size < L * k_batch:
                estimates[kind][v] = [None] * e.shape[1]
                continue
            pick = ok[: L * k_batch]
            estimates[kind][v] = [batch_ci(e[pick, k], L, k_batch, alpha) for k in range(e.shape[1])]

    orders = {}
    fixed = [f"h={format_step(h)}" for h in hs]
    for kind in ERROR_KINDS:
        rows = []
        n_rows = len(estimates[kind][variants[0]])
        for k in range(n_rows):
            cis = [estimates[kind][v][k] for v in fixed]
            if len(hs) < 2 or any(c is None or not c.mean > 0 for c in cis):
                rows.append(float("nan"))
            else:
                rows.append(fit_order(hs, [c.mean for c in cis]))
        orders[kind] = rows

    summary = dict(
        example=example,
        params={k: v for k, v in spec.params.items()},
        n_realizations=n_realizations,
        seed=seed,
        hs=[format_step(h) for h in hs],
        adaptive_tolerances=cfg.to_dict(),
        reference="exact" if spec.has_exact_filter else "adaptive",
        reference_tolerances=None if spec.has_exact_filter else spec.reference_tolerances,
        L=L,
        K=used_K,
        alpha=alpha,
        delta=delta,
        scheme=scheme,
        beta=beta,
        excluded=excluded,
        wall_time_s=time.perf_counter() - t_start,
    )
    return ExperimentResult(
        example=example,
        variants=variants,
        hs=hs,
        estimates=estimates,
        orders=orders,
        steps=steps,
        summary=summary,
        samples=samples,
    )


def available_workers():
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
