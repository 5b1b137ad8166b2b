"""Bounding-box driven trajectory planner with a from-scratch autodiff core."""
from .errors import (BBoxPlanError, CheckpointError, ContractError, DimensionError, GeometryError,
                     ParseError, TrainingError, ValidationError)

__version__ = "0.1.0"

__all__ = [
    "BBoxPlanError", "CheckpointError", "ContractError", "DimensionError", "GeometryError",
    "ParseError", "TrainingError", "ValidationError", "__version__",
]
