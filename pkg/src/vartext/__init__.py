"""Variational scene-text detector with a from-scratch autodiff core."""
from .estimator import TextDetector, calibrate_threshold
from .evalkit import EvalReport, evaluate, quad_iou
from .labelgen import CharScene, TargetPyramid, generate_targets
from .network import DetectorNet, ModelConfig
from .postprocess import Detection, DetectionSet, detect
from .synthdata import SceneSpec, generate_scene
from .train import TrainConfig, train_loop
from .vloss import LossReport, total_loss

__version__ = "0.1.0"

__all__ = [
    "CharScene", "Detection", "DetectionSet", "DetectorNet", "EvalReport", "LossReport",
    "ModelConfig", "SceneSpec", "TargetPyramid", "TextDetector", "TrainConfig",
    "calibrate_threshold", "detect", "evaluate", "generate_scene", "generate_targets",
    "quad_iou", "total_loss", "train_loop",
]
