"""Heteroscedasticity-identified exposure effects on right-censored outcomes.

The public entry points are :func:`run_pipeline` for one dataset,
:func:`monte_carlo` for simulation studies and the ``gelsurv`` command.
"""

from .data import Dataset, Schema, load_csv, save_csv, standardize
from .errors import GelSurvError, InputError, NumericalError
from .gel import closed_form_beta, estimate_beta, solve_lambda
from .inference import InferenceReport, infer, overid_test, weak_id_f
from .nuisance import LearnerSpec, fit_nuisance_bundle
from .pipeline import EstimatorConfig, prepare, run_pipeline
from .simulation import DgpSpec, gen_dataset, monte_carlo

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "Schema",
    "load_csv",
    "save_csv",
    "standardize",
    "GelSurvError",
    "InputError",
    "NumericalError",
    "closed_form_beta",
    "estimate_beta",
    "solve_lambda",
    "InferenceReport",
    "infer",
    "overid_test",
    "weak_id_f",
    "LearnerSpec",
    "fit_nuisance_bundle",
    "EstimatorConfig",
    "prepare",
    "run_pipeline",
    "DgpSpec",
    "gen_dataset",
    "monte_carlo",
]
