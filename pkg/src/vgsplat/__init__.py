"""CPU Gaussian-splatting micro-trainer with variance-guided densification and a hashed view-direction encoder."""

from .config import DensifyConfig, TrainConfig
from .core import Camera, GaussianSet, Scene, init_from_points

__all__ = ["Camera", "DensifyConfig", "GaussianSet", "Scene", "TrainConfig", "init_from_points"]
__version__ = "0.1.0"
