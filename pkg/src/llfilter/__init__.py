"""Local linearization filters for continuous-discrete state space models."""
from .adaptive import AdaptiveConfig, adaptive_predict, run_adaptive_filter
from .batch import BatchRun, run_batch, run_exact_batch
from .bench import ConfidenceEstimate, ErrorSample, batch_ci, fit_order, run_example_experiment, student_t_quantile
from .benchmarks import EXAMPLE_IDS, ExampleSpec, get_example, load_config
from .errors import (
    ConfigurationError,
    DivergenceError,
    ExpmError,
    LLFilterError,
    ModelError,
    SingularInnovationError,
)
from .estimator import LocalLinearizationFilter
from .filter import FilterRun, run_exact_lmv_filter, run_ll_filter, update
from .model import DiffusionModel, ObservationModel, validate_model
from .moments import MomentState, moment_step, predict_fixed
from .simulate import PathGrid, RngStream, simulate_observations
from .wll import linearize

__version__ = "0.1.0"
