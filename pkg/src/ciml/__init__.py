"""Multimodal segmentation by task decomposition, message passing and complementary-information filtering."""

from .config import (ArchitectureConfig, ConfigError, ExperimentConfig, ModalityId, RegionId, TaskAssignment,
                     TrainConfig, VolumeSample, brats_assignment, load_config, parse_config, poly_lr,
                     validate_assignment)

__version__ = "0.1.0"

__all__ = [
    "ArchitectureConfig", "ConfigError", "ExperimentConfig", "ModalityId", "RegionId", "TaskAssignment",
    "TrainConfig", "VolumeSample", "brats_assignment", "load_config", "parse_config", "poly_lr",
    "validate_assignment",
]
