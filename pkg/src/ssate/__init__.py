"""Semi-supervised doubly-robust estimation of average treatment effects."""

from .data import ESTIMATORS, Dataset, ModelConfig, RunConfig, load_run_config, read_csv, write_csv
from .errors import BenchmarkError, EstimationError, InputError, ResamplingError, SsateError
from .estimators import EstimateReport, FitContext, estimate, estimate_all
from .resampling import PerturbationScheme, draw_weights, perturb_estimate, resample_all, summarize
from .simulation import SimulationScenario, generate_dataset, run_benchmark, run_coverage, true_delta

__version__ = "0.1.0"

__all__ = [
    "ESTIMATORS",
    "BenchmarkError",
    "Dataset",
    "EstimateReport",
    "EstimationError",
    "FitContext",
    "InputError",
    "ModelConfig",
    "PerturbationScheme",
    "ResamplingError",
    "RunConfig",
    "SimulationScenario",
    "SsateError",
    "draw_weights",
    "estimate",
    "estimate_all",
    "generate_dataset",
    "load_run_config",
    "perturb_estimate",
    "read_csv",
    "resample_all",
    "run_benchmark",
    "run_coverage",
    "summarize",
    "true_delta",
    "write_csv",
]
