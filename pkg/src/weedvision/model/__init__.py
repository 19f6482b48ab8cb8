"""Dual-branch detector: encoder, pyramid backbone, adapters, head, training."""

from .adapter import FusionBlock, StaAdapter, VitProjection, alignment_loss, resample_map, tokens_to_map
from .assign import LevelTargets, assign_targets, route_level, stack_targets
from .backbone import STRIDES, ConvPyramidBackbone, FeaturePyramid, ResidualBlock
from .config import DetectorConfig, TrainConfig, ViTConfig, default_tap_layers, parse_split
from .detector import (
    Detector,
    count_params,
    letterbox_image,
    letterbox_params,
    load_detector,
    measure_latency,
    normalize_pixels,
    preprocess,
    preprocess_batch,
    remap_boxes,
    save_detector,
    slice_raw,
)
from .head import DetectionHead, RawPrediction, cell_centers, decode_distances, decode_predictions
from .losses import detection_loss
from .train import (
    CHECKPOINT_NAME,
    HISTORY_NAME,
    Sample,
    SplitIndices,
    TrainResult,
    prepare_samples,
    split_dataset,
    train,
)
from .vit import VitEncoder, VitOutputs, patchify

__all__ = [
    "FusionBlock",
    "StaAdapter",
    "VitProjection",
    "alignment_loss",
    "resample_map",
    "tokens_to_map",
    "LevelTargets",
    "assign_targets",
    "route_level",
    "stack_targets",
    "STRIDES",
    "ConvPyramidBackbone",
    "FeaturePyramid",
    "ResidualBlock",
    "DetectorConfig",
    "TrainConfig",
    "ViTConfig",
    "default_tap_layers",
    "parse_split",
    "Detector",
    "count_params",
    "letterbox_image",
    "letterbox_params",
    "load_detector",
    "measure_latency",
    "normalize_pixels",
    "preprocess",
    "preprocess_batch",
    "remap_boxes",
    "save_detector",
    "slice_raw",
    "DetectionHead",
    "RawPrediction",
    "cell_centers",
    "decode_distances",
    "decode_predictions",
    "detection_loss",
    "CHECKPOINT_NAME",
    "HISTORY_NAME",
    "Sample",
    "SplitIndices",
    "TrainResult",
    "prepare_samples",
    "split_dataset",
    "train",
    "VitEncoder",
    "VitOutputs",
    "patchify",
]
