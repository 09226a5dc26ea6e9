"""Desk-scale teacher/student distillation for point-based 3D detection.

Submodules:
  core        domain types, config, RNG
  autodiff    reverse-mode differentiation engine and optimizer
  sampling    FPS / confidence-weighted FPS, ball query, set aggregation
  repository  sparse voxel feature repository and its fusion update
  boxes       oriented-box geometry, rotated IoU, AP evaluation
  losses      temperature-sigmoid soft targets, focal/localization losses
  detector    teacher & student networks, distillation, inference
  data        synthetic labeled scenes, augmentation, serialization
  benchmark   the distillation-direction benchmark harness
  cli         command-line entry points
"""

from .core import (Box3D, ConfigError, LabeledScene, NumericError,
                   PipelineConfig, Point, PointCloud, normalize_yaw,
                   seeded_rng)

__all__ = [
    "Box3D", "ConfigError", "LabeledScene", "NumericError", "PipelineConfig",
    "Point", "PointCloud", "normalize_yaw", "seeded_rng",
]

__version__ = "0.1.0"
