"""Multi-temporal cloud removal with per-pixel, per-band uncertainty.

Submodules: :mod:`model` (network), :mod:`losses` (Gaussian NLL),
:mod:`uncertainty` (calibration, ensembles, discard curves), :mod:`metrics`,
:mod:`data` (synthetic scenes and dataset files), :mod:`harness`
(training and evaluation) and :mod:`cli`.
"""
from .config import ModelConfig, SynthConfig, TrainConfig
from .errors import (
    CloudReconError,
    ConfigError,
    DomainError,
    InputError,
    LoadError,
    NumericalError,
    TrainingError,
)
from .model import CloudRemovalNet, Prediction, count_parameters

__version__ = "0.1.0"

__all__ = [
    "CloudRemovalNet",
    "CloudReconError",
    "ConfigError",
    "DomainError",
    "InputError",
    "LoadError",
    "ModelConfig",
    "NumericalError",
    "Prediction",
    "SynthConfig",
    "TrainConfig",
    "TrainingError",
    "count_parameters",
]
