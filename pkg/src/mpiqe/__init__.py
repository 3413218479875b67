"""Multi-modal prompt learning for blind image quality assessment."""
from .config import (ModelConfig, Taxonomy, desk_config, distortion_taxonomy, load_config,
                     full_scale_config, save_config, scene_taxonomy)
from .model import MPIQE, build_model, trainable_parameters

__all__ = [
    "MPIQE",
    "ModelConfig",
    "Taxonomy",
    "build_model",
    "desk_config",
    "distortion_taxonomy",
    "load_config",
    "full_scale_config",
    "save_config",
    "scene_taxonomy",
    "trainable_parameters",
]
