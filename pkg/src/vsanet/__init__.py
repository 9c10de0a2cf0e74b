"""Exemplar-guided NIR to VIS face translation with spectral conditional attention."""

from vsanet.core import TrainConfig, load_config, seed_all

__all__ = ["TrainConfig", "load_config", "seed_all"]
__version__ = "0.1.0"
