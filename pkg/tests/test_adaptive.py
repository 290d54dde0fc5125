import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from llfilter.adaptive import (
    AdaptiveConfig,
    adaptive_predict,
    double_step,
    initial_stepsize,
    propose_stepsize,
    run_adaptive_filter,
    step_errors,
)
from llfilter.batch import run_batch, run_exact_batch
from llfilter.benchmarks import get_example
from llfilter.errors import ConfigurationError, DivergenceError
from llfilter.filter import exact_predict_example1, exact_predict_example2
from llfilter.moments import MomentState, predict_fixed
from llfilter.simulate import simulate_observations
from llfilter.wll import linearize

from conftest import linear_model

LOOSE = AdaptiveConfig(rtol_y=1e-3, atol_y=1e-3, rtol_P=1e-3, atol_P=1e-3)


def _ms(t, y, p):
    return MomentState(t, np.atleast_1d(np.asarray(y, float)), np.atleast_2d(np.asarray(p, float)))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        AdaptiveConfig(rtol_y=0.0)
    with pytest.raises(ConfigurationError):
        AdaptiveConfig(h_min=1e-3, h_max=1e-4)
    with pytest.raises(ConfigurationError):
        AdaptiveConfig.from_dict({"rtol": 1e-3})
    cfg = AdaptiveConfig.from_dict({"rtol_y": 1e-7, "h_max": 0.1})
    assert cfg.rtol_y == 1e-7 and AdaptiveConfig.from_dict(cfg.to_dict()) == cfg
    assert AdaptiveConfig().prs == np.finfo(float).eps


def test_propose_stepsize_examples():
    cfg = AdaptiveConfig()
    assert propose_stepsize(0.0, 0.0, 0.01, cfg) == pytest.approx(0.05)
    assert propose_stepsize(1.0, 0.0, 0.01, cfg) == pytest.approx(0.008)
    assert propose_stepsize(64.0, 0.0, 0.01, cfg) == pytest.approx(0.001)
    # reject branch with moderate error: 0.2 * (1/4)^(1/2) = 0.1
    assert propose_stepsize(4.0, 0.5, 0.01, cfg) == pytest.approx(0.001)
    assert propose_stepsize(1e6, 0.0, 1e-8, cfg) == cfg.h_min
    # beta = 2 uses exponent 1/3
    assert propose_stepsize(8.0, 0.0, 1.0, cfg, beta=2) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        propose_stepsize(-1.0, 0.0, 0.1, cfg)


def test_step_errors_examples():
    cfg = AdaptiveConfig(rtol_y=1e-300, atol_y=1e-8, rtol_P=1e-300, atol_P=1e-8)
    a = _ms(0.0, 0.0, 1.0)
    assert step_errors(a, a, a, cfg) == (0.0, 0.0)
    fine = _ms(0.0, 1e-8, 1.0)
    e1, e2 = step_errors(fine, a, a, cfg)
    assert e1 == pytest.approx(1.0) and e2 == 0.0
    cfg2 = AdaptiveConfig(rtol_y=1e-300, atol_y=2e-8, rtol_P=1e-300, atol_P=1e-8)
    assert step_errors(fine, a, a, cfg2)[0] == pytest.approx(0.5)
    # E2 averages over the d^2 entries of vec(P)
    f2 = _ms(0.0, [0.0, 0.0], [[1e-8, 0.0], [0.0, 0.0]])
    z2 = _ms(0.0, [0.0, 0.0], np.zeros((2, 2)))
    assert step_errors(f2, z2, z2, cfg)[1] == pytest.approx(0.5)


def test_initial_stepsize_stationary_point():
    model = linear_model([[0.0]], bs=[[0.0]])
    cfg = AdaptiveConfig(atol_y=1e-6, atol_P=1e-5, h_min=1e-9)
    h = initial_stepsize(model, _ms(0.0, 0.0, 0.0), cfg, 0.0, 1.0)
    assert h == pytest.approx(1e-6)
    cfg = AdaptiveConfig(atol_y=1e-6, atol_P=1e-5, h_min=1e-5)
    assert initial_stepsize(model, _ms(0.0, 0.0, 0.0), cfg, 0.0, 1.0) == 1e-5
    with pytest.raises(ValueError):
        initial_stepsize(model, _ms(0.0, 0.0, 0.0), cfg, 1.0, 1.0)


def test_initial_stepsize_bounded_by_interval():
    spec = get_example("ex3")
    cfg = AdaptiveConfig(rtol_y=1.0, atol_y=1.0, rtol_P=1.0, atol_P=1.0)
    h = initial_stepsize(spec.model, _ms(0.0, spec.x0, spec.q0), cfg, 0.0, 0.01)
    assert 0 < h <= 0.01


def test_double_step_lti_exact():
    model = linear_model([[-0.6, 0.3], [-0.2, -0.4]], a=[0.1, 0.2], Bs=[[[0.2, 0.0], [0.1, 0.1]]], bs=[[0.3, 0.1]])
    state = _ms(0.0, [1.0, -0.5], [[2.0, 0.2], [0.2, 1.0]])
    fine, coarse = double_step(model, linearize(model, 0.0, state.y), state, 0.2)
    assert np.allclose(fine.y, coarse.y, rtol=1e-11, atol=0)
    assert np.allclose(fine.p, coarse.p, rtol=1e-11, atol=0)


def test_double_step_zero_model():
    model = linear_model([[0.0]], bs=[[0.0]])
    state = _ms(0.0, 0.4, 1.0)
    fine, coarse = double_step(model, linearize(model, 0.0, state.y), state, 0.3)
    for s in (fine, coarse):
        assert np.allclose(s.y, state.y) and np.allclose(s.p, state.p)


def test_double_step_example1_local_order():
    spec = get_example("ex1")
    state = _ms(0.5, 1.0, 1.0)
    lin = linearize(spec.model, 0.5, state.y)
    diffs = []
    for h in (1 / 64, 1 / 128):
        fine, coarse = double_step(spec.model, lin, state, h)
        diffs.append(abs(fine.y[0] - coarse.y[0]))
    assert diffs[1] > 0
    assert 3.0 < diffs[0] / diffs[1] < 9.0


def _check_records(records, t_k, t_k1, cfg, h_max):
    taus = [r.tau for r in records if r.accepted]
    assert taus[0] == t_k
    assert np.all(np.diff(taus) > 0)
    last = [r for r in records if r.accepted][-1]
    assert abs(last.tau + 2 * last.h - t_k1) <= 4 * cfg.prs * max(abs(t_k1), 1.0)
    for r in records:
        assert cfg.h_min * (1 - 1e-12) <= r.h <= h_max * (1 + 1e-12)
        assert r.tau + 2 * r.h <= t_k1 * (1 + 1e-12)
        if r.accepted:
            assert max(r.e1, r.e2) <= 1.0 or r.h <= cfg.h_min * (1 + 1e-12)
        else:
            assert max(r.e1, r.e2) > 1.0


@pytest.mark.parametrize("name", ["ex1", "ex2"])
def test_adaptive_predict_soundness_examples(name):
    spec = get_example(name)
    t0 = spec.observation.times[0]
    cfg = AdaptiveConfig(rtol_y=1e-5, atol_y=1e-5, rtol_P=1e-5, atol_P=1e-8)
    out, var, records, h_next = adaptive_predict(spec.model, _ms(t0, spec.x0, spec.q0), t0, t0 + 1, cfg)
    assert out.t == t0 + 1
    assert np.allclose(var, out.p - np.outer(out.y, out.y))
    _check_records(records, t0, t0 + 1, cfg, 0.5)
    assert h_next > 0


@settings(max_examples=25, deadline=None)
@given(
    st.floats(-1.5, 0.5), st.floats(-1.0, 1.0), st.floats(-1.0, 0.0),
    st.floats(0.0, 0.5), st.floats(0.0, 0.5), st.floats(0.2, 2.0),
)
def test_adaptive_predict_random_linear(a11, a12, a22, bmul, badd, span):
    model = linear_model([[a11, a12], [0.0, a22]], a=[0.1, -0.2], Bs=[[[bmul, 0.0], [0.0, bmul]]], bs=[[badd, 0.1]])
    state = _ms(0.0, [1.0, 0.5], [[2.0, 0.3], [0.3, 1.0]])
    out, _, records, _ = adaptive_predict(model, state, 0.0, span, LOOSE)
    _check_records(records, 0.0, span, LOOSE, span / 2)
    assert out.t == span
    # LL is exact on linear models: every step is accepted with negligible error
    assert all(r.accepted for r in records)
    assert max(max(r.e1, r.e2) for r in records) <= 1e-11
    ref, _ = predict_fixed(model, state, span, [0.0, span])
    assert np.allclose(out.p, ref.p, rtol=1e-9) and np.allclose(out.y, ref.y, rtol=1e-9, atol=1e-12)


def test_lti_one_double_step_with_large_carry():
    model = linear_model([[-1.0]], bs=[[0.5]])
    out, _, records, _ = adaptive_predict(model, _ms(0.0, 1.0, 2.0), 0.0, 1.0, LOOSE, h_carry=10.0)
    assert len(records) == 1 and records[0].accepted and records[0].h == 0.5
    assert max(records[0].e1, records[0].e2) <= 1e-11


def test_h_max_respected():
    spec = get_example("ex1")
    cfg = AdaptiveConfig(rtol_y=1e-3, atol_y=1e-3, rtol_P=1e-3, atol_P=1e-3, h_max=0.05)
    _, _, records, _ = adaptive_predict(spec.model, _ms(0.5, 1.0, 1.0), 0.5, 1.5, cfg)
    _check_records(records, 0.5, 1.5, cfg, 0.05)
    assert sum(r.accepted for r in records) >= 10


def test_tolerance_monotone_single_interval():
    spec = get_example("ex1")
    p = spec.params
    x, _ = exact_predict_example1(1.0, 1.0, 0.5, 1.5, p["a"], p["sigma"])
    results = []
    for tol in (1e-5, 1e-7):
        cfg = AdaptiveConfig(rtol_y=tol, atol_y=tol, rtol_P=tol, atol_P=tol * 1e-3)
        out, _, rec, _ = adaptive_predict(spec.model, _ms(0.5, 1.0, 1.0), 0.5, 1.5, cfg)
        results.append((sum(r.accepted for r in rec), abs(out.y[0] - x)))
    assert results[1][0] > results[0][0]
    assert results[1][1] < results[0][1]


@pytest.mark.slow
def test_tolerance_monotone_statistical():
    spec = get_example("ex1")
    z = simulate_observations(spec.model, spec.observation, spec.x0, 50, 17)
    ref = run_exact_batch(spec, z)
    means = []
    for tol in (1e-5, 1e-6, 1e-7):
        cfg = AdaptiveConfig(rtol_y=tol, atol_y=tol, rtol_P=tol, atol_P=tol * 1e-3)
        run = run_batch(spec.model, spec.observation, z, spec.x0, spec.q0, grid="adaptive", cfg=cfg)
        means.append(np.abs(run.y_pred - ref.y_pred).mean())
    assert means[0] >= means[1] >= means[2]


def test_example1_reference_tolerances_beat_conventional():
    spec = get_example("ex1")
    p = spec.params
    x, _ = exact_predict_example1(1.0, 1.0, 0.5, 1.5, p["a"], p["sigma"])
    cfg = AdaptiveConfig(**spec.reference_tolerances)
    out, _, _, _ = adaptive_predict(spec.model, _ms(0.5, 1.0, 1.0), 0.5, 1.5, cfg)
    conv, _ = predict_fixed(spec.model, _ms(0.5, 1.0, 1.0), 1.5, [0.5, 1.5])
    assert abs(conv.y[0] - x) == pytest.approx(2.79e-3, rel=0.01)
    assert abs(out.y[0] - x) < 1e-7
    assert abs(out.y[0] - x) * 1e4 < abs(conv.y[0] - x)


def test_example2_reference_tolerances():
    spec = get_example("ex2")
    p = spec.params
    t0 = p["t0"]
    x, _ = exact_predict_example2(10.0, 100.0, t0, t0 + 1, p["a"], p["p"], p["sigma1"], p["sigma2"])
    cfg = AdaptiveConfig(**spec.reference_tolerances)
    out, _, _, _ = adaptive_predict(spec.model, _ms(t0, 10.0, 100.0), t0, t0 + 1, cfg)
    conv, _ = predict_fixed(spec.model, _ms(t0, 10.0, 100.0), t0 + 1, [t0, t0 + 1])
    assert abs(conv.y[0] - x) == pytest.approx(7.69e-2, rel=0.01)
    assert 2.17e-6 / 3 < abs(out.y[0] - x) < 2.17e-6 * 3


def test_run_adaptive_filter_records():
    spec = get_example("ex1")
    z = simulate_observations(spec.model, spec.observation, spec.x0, 1, 3)[0]
    run = run_adaptive_filter(spec.model, spec.observation, z, spec.x0, spec.q0, LOOSE)
    assert len(run.step_records) == 9
    for k, recs in enumerate(run.step_records):
        assert run.accepted_steps[k] == sum(r.accepted for r in recs)
        assert run.failed_steps[k] == len(recs) - run.accepted_steps[k]
    assert np.array_equal(run.t, spec.observation.times[1:])


def test_step_budget():
    spec = get_example("ex1")
    cfg = AdaptiveConfig(rtol_y=1e-10, atol_y=1e-10, rtol_P=1e-10, atol_P=1e-13, max_steps=5)
    with pytest.raises(DivergenceError):
        adaptive_predict(spec.model, _ms(0.5, 1.0, 1.0), 0.5, 1.5, cfg)


def test_argument_checks():
    spec = get_example("ex1")
    with pytest.raises(ValueError):
        adaptive_predict(spec.model, _ms(0.5, 1.0, 1.0), 0.5, 0.5, LOOSE)
    with pytest.raises(ValueError):
        adaptive_predict(spec.model, _ms(0.6, 1.0, 1.0), 0.5, 1.5, LOOSE)
    with pytest.raises(ValueError):
        double_step(spec.model, linearize(spec.model, 0.5, [1.0]), _ms(0.5, 1.0, 1.0), 0.0)
