"""Proposal decoding, proposal-aware matching, box-constrained masks and panoptic evaluation."""

from .config import Config, load_config
from .geometry import Box, dilate, giou, iou
from .rasters import BinaryMask, FeatureMap, PanopticMap, RegressionMap, ScalarMap, Segment

__version__ = "0.1.0"

__all__ = [
    "BinaryMask",
    "Box",
    "Config",
    "FeatureMap",
    "PanopticMap",
    "RegressionMap",
    "ScalarMap",
    "Segment",
    "dilate",
    "giou",
    "iou",
    "load_config",
]
