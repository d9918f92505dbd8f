"""Spatially constrained Bayesian unmixing of hyperspectral images.

Linear mixing with a Potts-Markov label field over the pixels, sampled by
a hybrid Metropolis-within-Gibbs algorithm, plus an FCLS baseline,
synthetic scene generation, evaluation and file formats.
"""

from .baseline import fcls_unmix_image, fcls_unmix_pixel
from .errors import UnmixError
from .evaluate import chain_report, classification_accuracy, global_mse
from .model import AbundanceMatrix, EndmemberMatrix, ImageCube, LogisticState, NoiseModel
from .potts import LabelField, NeighborhoodOrder, sample_field
from .sampler import (
    ChainConfig, PosteriorSamples, estimate_map_labels, estimate_mmse_abundances, run_chain,
)
from .synth import SceneSpec, generate_scene

__version__ = "0.1.0"

__all__ = [
    "AbundanceMatrix", "ChainConfig", "EndmemberMatrix", "ImageCube", "LabelField",
    "LogisticState", "NeighborhoodOrder", "NoiseModel", "PosteriorSamples", "SceneSpec",
    "UnmixError", "chain_report", "classification_accuracy", "estimate_map_labels",
    "estimate_mmse_abundances", "fcls_unmix_image", "fcls_unmix_pixel", "generate_scene",
    "global_mse", "run_chain", "sample_field",
]
