import numpy as np
import pytest

from llfilter.adaptive import AdaptiveConfig, run_adaptive_filter
from llfilter.benchmarks import get_example
from llfilter.errors import ConfigurationError
from llfilter.filter import (
    exact_predict_example2,
    run_exact_lmv_filter,
    run_ll_filter,
    uniform_nodes,
    update,
)
from llfilter.model import ObservationModel
from llfilter.moments import MomentState, predict_fixed
from llfilter.simulate import simulate_observations

from conftest import kalman_filter, linear_model


def _state(y, v, t=1.0):
    return MomentState.from_variance(t, np.atleast_1d(y).astype(float), np.atleast_2d(v).astype(float))


def test_update_scalar():
    obs = ObservationModel(c=[[1.0]], sigma=1.0, times=[0.0, 1.0])
    filt, gain, innov = update(_state(0.0, 1.0), [2.0], obs)
    assert np.isclose(gain[0, 0], 0.5) and np.isclose(filt.y[0], 1.0)
    assert np.isclose(filt.variance[0, 0], 0.5) and np.isclose(innov[0], 2.0)
    assert np.isclose(filt.p[0, 0], 0.5 + 1.0)


def test_update_perfect_observation():
    obs = ObservationModel(c=np.eye(2), sigma=np.zeros((2, 2)), times=[0.0, 1.0])
    filt, _, _ = update(_state([1.0, 2.0], [[2.0, 0.3], [0.3, 1.0]]), [0.5, -0.5], obs)
    assert np.allclose(filt.y, [0.5, -0.5], atol=1e-12)
    assert np.allclose(filt.variance, 0, atol=1e-12)


def test_update_no_information():
    obs = ObservationModel(c=[[1.0]], sigma=1e12, times=[0.0, 1.0])
    pred = _state(0.3, 2.0)
    filt, _, _ = update(pred, [5.0], obs)
    assert np.isclose(filt.y[0], 0.3, atol=1e-10) and np.isclose(filt.variance[0, 0], 2.0, rtol=1e-10)


def test_uniform_nodes():
    n = uniform_nodes(0.5, 1.5, 1 / 64)
    assert n.size == 65 and n[0] == 0.5 and n[-1] == 1.5
    assert np.allclose(np.diff(n), 1 / 64)
    n = uniform_nodes(0.0, 1.0, 0.3)
    assert n[-1] == 1.0 and np.diff(n).max() <= 0.3 + 1e-15


@pytest.mark.parametrize("grid", ["conventional", 1.0, 0.25, 1 / 64])
def test_kalman_equivalence_fixed_grid(ou_setup, grid):
    model, obs, z, x0, q0 = ou_setup
    run = run_ll_filter(model, obs, z, x0, q0, grid)
    ref = kalman_filter(np.array([[-1.0]]), np.zeros(1), np.array([[0.5]]), obs, z, x0, q0 - np.outer(x0, x0))
    for got, want in zip((run.y_pred, run.v_pred, run.y_filt, run.v_filt), ref):
        assert np.allclose(got, want, rtol=1e-9, atol=1e-12)


def test_kalman_equivalence_adaptive(ou_setup):
    model, obs, z, x0, q0 = ou_setup
    run = run_adaptive_filter(model, obs, z, x0, q0)
    ref = kalman_filter(np.array([[-1.0]]), np.zeros(1), np.array([[0.5]]), obs, z, x0, q0 - np.outer(x0, x0))
    for got, want in zip((run.y_pred, run.v_pred, run.y_filt, run.v_filt), ref):
        assert np.allclose(got, want, rtol=1e-9, atol=1e-12)
    # after the first interval the carried step spans a whole interval
    assert np.all(run.accepted_steps[1:] == 1)
    assert not run.failed_steps.any()


def test_kalman_equivalence_2d_with_drift_constant():
    A = np.array([[-0.5, 1.0], [-1.0, -0.5]])
    a = np.array([0.2, -0.1])
    G = np.array([[0.3, 0.0], [0.1, 0.4]])
    model = linear_model(A, a=a, bs=G.T)
    obs = ObservationModel(c=[[1.0, 0.0]], sigma=0.05, times=np.linspace(0, 4.5, 10))
    z = np.random.default_rng(9).normal(size=(10, 1))
    x0, v0 = np.array([1.0, -1.0]), np.array([[0.5, 0.1], [0.1, 0.3]])
    ref = kalman_filter(A, a, G, obs, z, x0, v0)
    for grid in ("conventional", 1 / 8):
        run = run_ll_filter(model, obs, z, x0, v0 + np.outer(x0, x0), grid)
        for got, want in zip((run.y_pred, run.v_pred, run.y_filt, run.v_filt), ref):
            assert np.allclose(got, want, rtol=1e-9, atol=1e-12)


@pytest.fixture(scope="module")
def ex1_data():
    spec = get_example("ex1")
    return spec, simulate_observations(spec.model, spec.observation, spec.x0, 1, 5)[0]


def test_run_invariants(ex1_data):
    spec, z = ex1_data
    for run in (run_exact_lmv_filter(spec, z), run_ll_filter(spec.model, spec.observation, z, spec.x0, spec.q0, 1 / 16)):
        c = spec.observation.c
        for k in range(run.n_steps):
            K, V = run.gain[k], run.v_pred[k]
            assert np.allclose(run.v_filt[k], (np.eye(1) - K @ c) @ V, rtol=1e-10, atol=1e-15)
            assert np.trace(run.v_filt[k]) <= np.trace(V) + 1e-12
            s = c @ V @ c.T + spec.observation.sigma_at(run.t[k])
            assert np.abs(K @ s - V @ c.T).max() <= 1e-10 * (1 + np.abs(V @ c.T).max())


def test_exact_filter_example1_consistency(ex1_data):
    spec, z = ex1_data
    run = run_exact_lmv_filter(spec, z)
    assert run.t[0] == 1.5 and run.n_steps == 9
    u_pred = run.v_pred[:, 0, 0]
    u_filt = run.v_filt[:, 0, 0]
    assert np.allclose(u_filt, (1 - run.gain[:, 0, 0]) * u_pred, rtol=1e-12)


def test_exact_filter_only_for_closed_forms():
    with pytest.raises(ConfigurationError):
        run_exact_lmv_filter("ex3", np.zeros((10, 1)))


def test_example2_closed_form_against_refinement():
    spec = get_example("ex2")
    par = spec.params
    t0 = par["t0"]
    x, q = exact_predict_example2(10.0, 100.0, t0, t0 + 1, par["a"], par["p"], par["sigma1"], par["sigma2"])
    st, _ = predict_fixed(spec.model, MomentState(t0, np.array([10.0]), np.array([[100.0]])), t0 + 1,
                          uniform_nodes(t0, t0 + 1, 1 / 1024))
    assert abs(st.y[0] - x) <= 1e-3 * abs(x)
    assert abs(st.p[0, 0] - q) <= 1e-3 * abs(q)
    with pytest.raises(ValueError):
        exact_predict_example2(1.0, 1.0, 0.0, 1.0, 0.0, 2, 1.0, 1.0)


def test_fine_grid_approaches_exact(ex1_data):
    spec, z = ex1_data
    exact = run_exact_lmv_filter(spec, z)
    errs = [abs(run_ll_filter(spec.model, spec.observation, z, spec.x0, spec.q0, h).y_filt[0, 0] - exact.y_filt[0, 0])
            for h in (1 / 16, 1 / 64, 1 / 256)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-6


def test_zero_noise_constant_path():
    # constant state observed without noise: the filter reproduces the observations
    model = linear_model([[0.0]], bs=[[0.0]])
    obs = ObservationModel(c=[[1.0]], sigma=1e-14, times=np.arange(5.0))
    z = np.full((5, 1), 2.5)
    run = run_ll_filter(model, obs, z, [0.0], [[4.0]], "conventional")
    assert np.allclose(run.y_filt[:, 0], 2.5, rtol=1e-10)


def test_update_at_t0(ou_setup):
    model, obs, z, x0, q0 = ou_setup
    a = run_ll_filter(model, obs, z, x0, q0, update_at_t0=False)
    b = run_ll_filter(model, obs, z, x0, q0, update_at_t0=True)
    filt0, _, _ = update(MomentState(0.0, x0, q0), z[0], obs)
    c = run_ll_filter(model, obs, z, filt0.y, filt0.p)
    assert a.y_pred[0, 0] != b.y_pred[0, 0]
    assert np.allclose(b.y_filt, c.y_filt, rtol=1e-14)


def test_data_shape_checked(ex1_data):
    spec, z = ex1_data
    with pytest.raises(ValueError):
        run_ll_filter(spec.model, spec.observation, z[:5], spec.x0, spec.q0)


def test_filter_run_csv(ex1_data, tmp_path):
    spec, z = ex1_data
    run = run_ll_filter(spec.model, spec.observation, z, spec.x0, spec.q0, 1 / 4)
    text = run.to_csv(tmp_path / "run.csv")
    lines = text.splitlines()
    assert lines[0] == 'k,t,y_pred[0],"V_pred[0,0]",y_filt[0],"V_filt[0,0]","K[0,0]",accepted_steps,failed_steps'
    assert len(lines) == 10
    assert lines[1].endswith(",4,0")
    assert (tmp_path / "run.csv").read_text() == text
