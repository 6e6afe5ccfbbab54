"""Retinex-guided latent diffusion restoration for low-light images."""

from .config import ModelConfig, TrainConfig, build_config
from .infer import infer
from .model import RetiDiff
from .retinex import decompose, recompose
from .rldm import make_schedule

__version__ = "0.1.0"

__all__ = ["ModelConfig", "TrainConfig", "RetiDiff", "build_config", "decompose", "infer", "make_schedule",
           "recompose", "__version__"]
