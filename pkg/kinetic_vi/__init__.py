"""
kinetic-vi - variational inference for stochastic kinetic models
随机动力学模型的变分推断
"""

__version__ = "0.1.0"

from .config import AppConfig, InferenceMode, LearnConfig, MaskSpec, MaskTask, SamplerConfig, ViConfig
from .engine import Diagnostics, IndividualPosterior, bethe_free_energy, infer
from .epidemic import ContactGraph, EpidemicParams, compile_system, simulate
from .errors import (
    DataFormatError,
    EvaluationError,
    HazardOverflowError,
    ModelValidationError,
    SkmError,
    StateSpaceTooLargeError,
    UnknownEventError,
    UsageError,
    WeightCollapseError,
)
from .exact import exact_forward_backward
from .learning import learn_rates
from .model import Competition, EventSpec, ObservationModel, Participant, SkmSystem, TrajectoryBundle

__all__ = [
    "__version__",
    "AppConfig",
    "Competition",
    "ContactGraph",
    "DataFormatError",
    "Diagnostics",
    "EpidemicParams",
    "EvaluationError",
    "EventSpec",
    "HazardOverflowError",
    "IndividualPosterior",
    "InferenceMode",
    "LearnConfig",
    "MaskSpec",
    "MaskTask",
    "ModelValidationError",
    "ObservationModel",
    "Participant",
    "SamplerConfig",
    "SkmError",
    "SkmSystem",
    "StateSpaceTooLargeError",
    "TrajectoryBundle",
    "UnknownEventError",
    "UsageError",
    "ViConfig",
    "WeightCollapseError",
    "bethe_free_energy",
    "compile_system",
    "exact_forward_backward",
    "infer",
    "learn_rates",
    "simulate",
]
