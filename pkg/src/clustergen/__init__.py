"""Clustered generator model: unsupervised clustering with a generator
network over a discrete cluster latent y and a continuous style latent z,
learned by alternating Langevin inference and momentum-SGD ascent."""

from .errors import (ClusterGenError, ConfigError, GenerationError,
                     InputError, NumericalError, ParseError, ShapeError)
from .model import LatentState, ModelConfig
from .infer import InferenceConfig
from .learn import TrainConfig, TrainState, fit
from .data import Dataset, load_idx, synth_mixture, write_image_grid
from .metrics import ClusterEval, clustering_accuracy, hungarian
from .pixelwise import LabelMap, PixelSceneConfig

__all__ = [
    "ClusterGenError", "ConfigError", "GenerationError", "InputError",
    "NumericalError", "ParseError", "ShapeError",
    "LatentState", "ModelConfig", "InferenceConfig", "TrainConfig",
    "TrainState", "fit", "Dataset", "load_idx", "synth_mixture",
    "write_image_grid", "ClusterEval", "clustering_accuracy", "hungarian",
    "LabelMap", "PixelSceneConfig",
]

__version__ = "0.1.0"
