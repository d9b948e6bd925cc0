"""Probabilistic digital twin for misspecified linear structural models.

The pipeline has three stages. Diagnosis estimates states and latent
forces with a Gaussian-process latent force model. Mapping trains a
Bayesian neural network on samples of the smoothed posterior. Prognosis
predicts new responses without measurements, feeding BNN pseudo-measurements
into a Kalman filter.
"""
from .benchmarks import TrueSystem, add_measurement_noise, coverage, nmse, simulate_true
from .bnn import BnnModel, BnnTopology, MapDataset, TrainConfig
from .diagnosis import DiagnosisConfig, DiagnosisResult, MeasurementData, OptimizerConfig, StudentTPrior, run_diagnosis
from .kalman import FilterError, GaussianState, kalman_filter, rts_smoother
from .prognosis import PrognosisConfig, PrognosisInputs, PrognosisResult, run_prognosis
from .statespace import GpHyperparams, OutputSpec, PhysicalParams
from .studies import CaseStudy, ExcitationSpec, builtin_study, run_case

__version__ = "0.1.0"

__all__ = [
    "BnnModel",
    "BnnTopology",
    "CaseStudy",
    "DiagnosisConfig",
    "DiagnosisResult",
    "ExcitationSpec",
    "FilterError",
    "GaussianState",
    "GpHyperparams",
    "MapDataset",
    "MeasurementData",
    "OptimizerConfig",
    "OutputSpec",
    "PhysicalParams",
    "PrognosisConfig",
    "PrognosisInputs",
    "PrognosisResult",
    "StudentTPrior",
    "TrainConfig",
    "TrueSystem",
    "add_measurement_noise",
    "builtin_study",
    "coverage",
    "kalman_filter",
    "nmse",
    "rts_smoother",
    "run_case",
    "run_diagnosis",
    "run_prognosis",
    "simulate_true",
]
