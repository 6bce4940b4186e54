"""Unsupervised 3D auto labeling from LiDAR sweeps and per-point
vision-language features."""

from .config import PipelineConfig, load_config
from .frame import Frame
from .geometry import Box7, Pose, iou_3d, iou_bev, nms
from .pipeline import AutoLabeler, run_autolabel, run_eval, run_query
from .semantics import OpenVocabularyClassifier, StreamingPCA, TextQuery
from .synth import generate, occlusion_scenario

__version__ = "0.1.0"

__all__ = [
    "AutoLabeler",
    "Box7",
    "Frame",
    "OpenVocabularyClassifier",
    "PipelineConfig",
    "Pose",
    "StreamingPCA",
    "TextQuery",
    "generate",
    "iou_3d",
    "iou_bev",
    "load_config",
    "nms",
    "occlusion_scenario",
    "run_autolabel",
    "run_eval",
    "run_query",
]
