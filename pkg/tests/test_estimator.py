import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from llfilter import LocalLinearizationFilter
from llfilter.benchmarks import get_example
from llfilter.errors import ConfigurationError, ModelError
from llfilter.filter import run_ll_filter
from llfilter.simulate import simulate_observations

from conftest import kalman_filter


@pytest.fixture(scope="module")
def ex1_data():
    spec = get_example("ex1")
    return simulate_observations(spec.model, spec.observation, spec.x0, 1, seed=11)[0]


def test_transform_matches_filter(ex1_data):
    spec = get_example("ex1")
    est = LocalLinearizationFilter(example="ex1", grid=1 / 8).fit(ex1_data)
    out = est.transform(ex1_data)
    run = run_ll_filter(spec.model, spec.observation, ex1_data, spec.x0, spec.q0, 1 / 8)
    assert out.shape == (spec.observation.times.size, 1)
    np.testing.assert_array_equal(out[1:], run.y_filt)
    np.testing.assert_array_equal(out[0], spec.x0)
    np.testing.assert_array_equal(est.predict(ex1_data)[1:], run.y_pred)
    assert est.n_features_in_ == 1


@pytest.mark.parametrize("grid", ["adaptive", "conventional", "exact", 0.25])
def test_grids_agree_roughly(ex1_data, grid):
    out = LocalLinearizationFilter(example="ex1", grid=grid).fit_transform(ex1_data)
    ref = LocalLinearizationFilter(example="ex1", grid="exact").fit_transform(ex1_data)
    assert np.max(np.abs(out - ref)) < 0.1


def test_kalman_equivalence(ou_setup):
    model, obs, z, x0, q0 = ou_setup
    est = LocalLinearizationFilter(model=model, observation=obs, x0=x0, q0=q0, grid="conventional")
    out = est.fit(z).transform(z)
    _, _, y_filt, _ = kalman_filter(np.array([[-1.0]]), np.zeros(1), np.array([[0.5]]), obs, z, x0, q0 - np.outer(x0, x0))
    np.testing.assert_allclose(out[1:], y_filt, rtol=1e-10, atol=1e-12)


def test_sklearn_protocol(ex1_data):
    est = LocalLinearizationFilter(example="ex1", beta=2, rtol_y=1e-5)
    params = est.get_params()
    assert params["beta"] == 2 and params["rtol_y"] == 1e-5
    twin = clone(est)
    assert twin.get_params() == params and not hasattr(twin, "model_")
    est.set_params(grid=0.5)
    assert est.grid == 0.5
    with pytest.raises(NotFittedError):
        twin.transform(ex1_data)


def test_errors(ex1_data, ou_setup):
    with pytest.raises(ConfigurationError):
        LocalLinearizationFilter().fit(ex1_data)
    with pytest.raises(ConfigurationError):
        LocalLinearizationFilter(example="ex1", grid="bogus").fit(ex1_data)
    with pytest.raises(ConfigurationError):
        LocalLinearizationFilter(example="ex1", beta=3).fit(ex1_data)
    with pytest.raises(ConfigurationError):
        LocalLinearizationFilter(example="ex3", grid="exact").fit(np.zeros((10, 1)))
    with pytest.raises(ModelError):
        LocalLinearizationFilter(example="ex1", x0=[0.0, 1.0]).fit(ex1_data)
    with pytest.raises(ValueError):
        LocalLinearizationFilter(example="ex1").fit(ex1_data[:-1])
    est = LocalLinearizationFilter(example="ex1", grid=0.5).fit(ex1_data)
    with pytest.raises(ValueError):
        est.transform(np.zeros((ex1_data.shape[0], 2)))
