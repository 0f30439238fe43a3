"""Warping-based semantic video segmentation on compressed-domain motion,
with feature-space correction of the warped context."""

from .data import GopSequence, SceneSpec, generate_sequence, load_sequence, save_sequence
from .evaluation import ConfusionMatrix, count_flops, miou, sweep_T
from .models import BackboneConfig, keyframe_forward, nkfc_forward
from .training import TrainConfig, train_keyframe, train_nkfc
from .warp import FeatureMap, MotionMap, reconstruct_frame, warp_features, warp_image

__all__ = [
    "BackboneConfig", "ConfusionMatrix", "FeatureMap", "GopSequence", "MotionMap", "SceneSpec",
    "TrainConfig", "count_flops", "generate_sequence", "keyframe_forward", "load_sequence", "miou",
    "nkfc_forward", "reconstruct_frame", "save_sequence", "sweep_T", "train_keyframe", "train_nkfc",
    "warp_features", "warp_image",
]
