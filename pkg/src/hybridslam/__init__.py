"""Keyframe-based stereo and hybrid stereo/fisheye visual SLAM on precomputed features."""

from .camera_models import FisheyeModel, PinholeModel, RectifiedStereoRig
from .features import Feature, FeatureSet
from .geometry import Pose, Trajectory
from .system import SlamOutput, SlamSystem
from .tracking import PipelineConfig

__all__ = [
    "FeatureSet",
    "Feature",
    "FisheyeModel",
    "PinholeModel",
    "PipelineConfig",
    "Pose",
    "RectifiedStereoRig",
    "SlamOutput",
    "SlamSystem",
    "Trajectory",
]
