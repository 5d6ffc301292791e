"""Dense SAR-optical registration: gradient-enhanced pyramids and affine-flow matching."""

from .config import RunConfig, load_config, load_preset, save_config
from .data import (ImagePair, PerturbationSpec, apply_perturbation,
                   generate_mini_dataset, load_dataset, sample_perturbation)
from .errors import (ConfigurationError, DataLoadError, DegenerateInputError,
                     DivergenceError, SomaError, ValidationError)
from .geometry import (AffineParams, DisplacementField, affine_to_flow,
                       compose, load_field, save_field, warp)
from .losses import LossBreakdown, LossWeights, total_loss
from .metrics import EvalRecord, cmr, pair_error, r_avg, report
from .model import ABLATION_PRESETS, AblationFlags, SomaModel, build_model
from .training import evaluate, register, register_files, train

__version__ = "0.1.0"

__all__ = [
    "ABLATION_PRESETS", "AblationFlags", "AffineParams", "ConfigurationError",
    "DataLoadError", "DegenerateInputError", "DisplacementField",
    "DivergenceError", "EvalRecord", "ImagePair", "LossBreakdown",
    "LossWeights", "PerturbationSpec", "RunConfig", "SomaError", "SomaModel",
    "ValidationError", "affine_to_flow", "apply_perturbation", "build_model",
    "cmr", "compose", "evaluate", "generate_mini_dataset", "load_config",
    "load_dataset", "load_field", "load_preset", "pair_error", "r_avg",
    "register", "register_files", "report", "sample_perturbation",
    "save_config", "save_field", "total_loss", "train", "warp",
]
