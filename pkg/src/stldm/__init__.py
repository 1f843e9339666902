"""Latent diffusion for precipitation nowcasting: VAE, translator, conditional denoiser.

Submodules: ``schedule``, ``networks``, ``losses``, ``training``, ``sampling``, ``metrics``,
``data``, ``config``, ``io``, ``experiments`` and ``cli``.
"""

from .config import Config, load_config, full_scale_config
from .networks import ModelDims, STLDM, init_params
from .schedule import DiffusionSchedule, build_schedule

__version__ = "0.1.0"

__all__ = ["Config", "DiffusionSchedule", "ModelDims", "STLDM", "build_schedule",
           "init_params", "load_config", "full_scale_config"]
