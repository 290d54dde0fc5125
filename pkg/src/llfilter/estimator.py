"""scikit-learn style front end for the filters.

``X`` is one observation series: row ``k`` holds ``z_{t_k}`` for the
observation times of the model. ``transform`` returns the filtered means and
``predict`` the one-step predictions, both with one row per observation time
(row 0 is the initial mean, or its update when ``update_at_t0`` is set).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .adaptive import AdaptiveConfig, run_adaptive_filter
from .benchmarks import get_example
from .errors import ConfigurationError, ModelError
from .filter import run_exact_lmv_filter, run_ll_filter, update, _initial_state
from .model import validate_model

__all__ = ["LocalLinearizationFilter"]


class LocalLinearizationFilter(TransformerMixin, BaseEstimator):
    """Order-``beta`` local linearization filter as an estimator.

    Parameters
    ----------
    example : str, optional
        Benchmark id (``"ex1"`` .. ``"ex4"``); supplies model, observation
        scheme and initial moments unless those are given explicitly.
    model, observation : DiffusionModel, ObservationModel, optional
    x0, q0 : array-like, optional
        Initial mean and second moment.
    grid : "adaptive", "conventional", "exact" or float
        Prediction grid; ``"exact"`` uses the closed-form filter of
        ``ex1``/``ex2``.
    beta : {1, 2}
    rtol_y, atol_y, rtol_P, atol_P, h_min, h_max : float
        Adaptive controller settings (used only with ``grid="adaptive"``).
    validate : bool
        Check the model derivatives by finite differences in ``fit``.
    """

    def __init__(
        self,
        example=None,
        model=None,
        observation=None,
        x0=None,
        q0=None,
        grid="adaptive",
        beta=1,
        rtol_y=1e-6,
        atol_y=1e-6,
        rtol_P=1e-6,
        atol_P=1e-9,
        h_min=1e-8,
        h_max=None,
        update_at_t0=False,
        validate=True,
    ):
        self.example = example
        self.model = model
        self.observation = observation
        self.x0 = x0
        self.q0 = q0
        self.grid = grid
        self.beta = beta
        self.rtol_y = rtol_y
        self.atol_y = atol_y
        self.rtol_P = rtol_P
        self.atol_P = atol_P
        self.h_min = h_min
        self.h_max = h_max
        self.update_at_t0 = update_at_t0
        self.validate = validate

    def _resolve(self):
        spec = get_example(self.example) if self.example is not None else None
        model = self.model if self.model is not None else (spec.model if spec else None)
        obs = self.observation if self.observation is not None else (spec.observation if spec else None)
        x0 = self.x0 if self.x0 is not None else (spec.x0 if spec else None)
        q0 = self.q0 if self.q0 is not None else (spec.q0 if spec else None)
        if model is None or obs is None or x0 is None or q0 is None:
            raise ConfigurationError("give an example id or model, observation, x0 and q0")
        return spec, model, obs, np.atleast_1d(np.asarray(x0, dtype=float)), np.atleast_2d(np.asarray(q0, dtype=float))

    def _check_grid(self):
        g = self.grid
        if isinstance(g, str):
            if g not in ("adaptive", "conventional", "exact"):
                raise ConfigurationError(f"unknown grid {g!r}")
            return
        if not float(g) > 0:
            raise ConfigurationError("grid step must be positive")

    def fit(self, X, y=None):
        """Validate the model and the shape of ``X``; nothing is estimated."""
        self._check_grid()
        if self.beta not in (1, 2):
            raise ConfigurationError("beta must be 1 or 2")
        spec, model, obs, x0, q0 = self._resolve()
        if self.grid == "exact" and (spec is None or not spec.has_exact_filter):
            raise ConfigurationError("grid='exact' needs example 'ex1' or 'ex2'")
        if x0.shape != (model.dim,) or q0.shape != (model.dim, model.dim):
            raise ModelError("initial moments do not match the model dimension")
        if self.validate:
            report = validate_model(model, [(float(obs.times[0]), x0), (float(obs.times[-1]), x0)])
            if not report.passed:
                raise ModelError(f"model derivatives disagree with finite differences: {report.flagged}")
        X = self._validate_series(X, obs)
        self.spec_ = spec
        self.model_ = model
        self.observation_ = obs
        self.x0_ = x0
        self.q0_ = q0
        self.n_features_in_ = X.shape[1]
        return self

    @staticmethod
    def _validate_series(X, obs):
        X = check_array(X, ensure_2d=False, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.shape != (obs.times.size, obs.dim_obs):
            raise ValueError(f"X has shape {X.shape}, expected {(obs.times.size, obs.dim_obs)}")
        return X

    def _run(self, X):
        check_is_fitted(self, "model_")
        X = self._validate_series(X, self.observation_)
        if X.shape[1] != self.n_features_in_:
            raise ValueError("X has a different number of features than during fit")
        if self.grid == "exact":
            run = run_exact_lmv_filter(self.spec_, X, update_at_t0=self.update_at_t0)
        elif self.grid == "adaptive":
            cfg = AdaptiveConfig(
                rtol_y=self.rtol_y, atol_y=self.atol_y, rtol_P=self.rtol_P, atol_P=self.atol_P,
                h_min=self.h_min, h_max=self.h_max,
            )
            run = run_adaptive_filter(
                self.model_, self.observation_, X, self.x0_, self.q0_, cfg, self.beta, self.update_at_t0
            )
        else:
            run = run_ll_filter(
                self.model_, self.observation_, X, self.x0_, self.q0_, self.grid, self.beta, self.update_at_t0
            )
        self.run_ = run
        start = _initial_state(self.observation_, self.x0_, self.q0_)
        if self.update_at_t0:
            start, _, _ = update(start, X[0], self.observation_)
        return run, start

    def transform(self, X):
        """Filtered means, shape ``(M, d)``."""
        run, start = self._run(X)
        return np.vstack([start.y[None], run.y_filt])

    def predict(self, X):
        """One-step predicted means, shape ``(M, d)``."""
        run, start = self._run(X)
        return np.vstack([start.y[None], run.y_pred])
