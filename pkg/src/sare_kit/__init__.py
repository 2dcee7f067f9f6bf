"""Structure-aware fracture reassembly with rectified flow."""

__version__ = "0.1.0"

from .errors import (ArtifactError, ConfigError, DegenerateGeometryError, GenerationFailureError,
                     InvalidArgumentError, NumericError, ParseError, SareError, TrainingDivergedError)
from .fracture import AssemblySample, Fragment, fracture_object, label_structure
from .geom import PointCloud, RigidTransform, chamfer_distance, fps_sample, kabsch_align, voxelize

__all__ = [
    "ArtifactError", "AssemblySample", "ConfigError", "DegenerateGeometryError", "Fragment",
    "GenerationFailureError", "InvalidArgumentError", "NumericError", "ParseError", "PointCloud",
    "RigidTransform", "SareError", "TrainingDivergedError", "chamfer_distance", "fps_sample",
    "fracture_object", "kabsch_align", "label_structure", "voxelize",
]
