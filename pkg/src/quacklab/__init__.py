"""Bounded attention-logit change: QuacK learning rates, QK norm/clip baselines, MHA and MLA."""

from .config import RunConfig, load_config
from .interventions import Intervention, InterventionKind
from .model import ModelConfig, forward, forward_loss, init_params
from .norms import NormKind, matrix_norm, spectral_norm
from .train import run_sweep, run_training

__version__ = "0.1.0"

__all__ = ["Intervention", "InterventionKind", "ModelConfig", "NormKind", "RunConfig",
           "forward", "forward_loss", "init_params", "load_config", "matrix_norm",
           "run_sweep", "run_training", "spectral_norm"]
