"""Mask prediction from refined queries.

Stuff masks correlate the projected query with the stride-4 features over the
whole image. Thing masks do the same but only inside the query's dilated box;
every stride-4 cell whose center falls outside the dilated box is exactly 0.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.special import expit

from .config import DilationConfig
from .geometry import Box, dilate
from .rasters import BinaryMask, FeatureMap

MASK_STRIDE = 4


class EmptyBoxWarning(UserWarning):
    """A thing query's dilated box covers no cell of the mask grid."""


@dataclass(frozen=True, eq=False)
class MaskProjection:
    """Linear map ``f(q) = W q + b`` applied to content queries."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ValueError(f"projection shapes do not agree: W{w.shape}, b{b.shape}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @classmethod
    def identity(cls, channels: int) -> "MaskProjection":
        return cls(np.eye(channels), np.zeros(channels))

    def __call__(self, q) -> np.ndarray:
        return self.weight @ np.asarray(q, dtype=np.float64) + self.bias


@dataclass(frozen=True, eq=False)
class InstancePrediction:
    """One decoded query: per-class sigmoid probabilities, box, stride-4 mask."""

    class_probs: np.ndarray
    box: Box  # normalized
    mask: np.ndarray  # probability grid
    is_thing: bool = True

    @property
    def confidence(self) -> float:
        return float(np.max(self.class_probs)) if len(self.class_probs) else 0.0

    @property
    def label(self) -> int:
        return int(np.argmax(self.class_probs))


def _logits(features: FeatureMap, q_f, proj: MaskProjection) -> np.ndarray:
    q = proj(q_f)
    if q.shape[0] != features.channels:
        raise ValueError(f"projected query has {q.shape[0]} dims, features have {features.channels}")
    return features.data @ q


def stuff_mask(features_p4: FeatureMap, q_f, proj: MaskProjection) -> np.ndarray:
    return expit(_logits(features_p4, q_f, proj))


def box_cell_window(box_px: Box, grid_h: int, grid_w: int, stride: int = MASK_STRIDE):
    """Boolean grid of cells whose centers lie inside ``box_px`` (edges inclusive)."""
    x1, y1, x2, y2 = box_px.corners()
    xs = (np.arange(grid_w) + 0.5) * stride
    ys = (np.arange(grid_h) + 0.5) * stride
    cols = (xs >= x1) & (xs <= x2)
    rows = (ys >= y1) & (ys <= y2)
    return rows[:, None] & cols[None, :]


def thing_mask(
    features_p4: FeatureMap,
    q_f,
    q_box: Box,
    proj: MaskProjection,
    image_w: float,
    image_h: float,
    dilation: DilationConfig = DilationConfig(),
) -> np.ndarray:
    """Box-constrained mask probabilities on the stride-4 grid.

    A box that covers no cell center after dilation and clipping yields an
    all-zero grid and an :class:`EmptyBoxWarning`.
    """
    inside = thing_mask_support(features_p4, q_box, image_w, image_h, dilation)
    out = np.zeros((features_p4.height, features_p4.width), dtype=np.float64)
    if not inside.any():
        warnings.warn("thing box covers no mask cell", EmptyBoxWarning, stacklevel=2)
    else:
        rows, cols = np.nonzero(inside)
        q = proj(q_f)
        out[rows, cols] = expit(features_p4.data[rows, cols] @ q)
    return out


def thing_mask_support(features_p4: FeatureMap, q_box: Box, image_w, image_h, dilation=DilationConfig()):
    box_px = q_box.to_pixels(image_w, image_h)
    grown = dilate(box_px, image_w, image_h, dilation.ratio, dilation.cap, dilation.mode)
    return box_cell_window(grown, features_p4.height, features_p4.width, features_p4.stride)


def upsample_probs(mask: np.ndarray, out_h: int, out_w: int, mode: str = "nearest") -> np.ndarray:
    """Resample a coarse probability grid to ``(out_h, out_w)`` pixels.

    ``nearest`` looks up the cell containing each pixel; ``bilinear``
    interpolates between cell centers.
    """
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape
    if (h, w) == (out_h, out_w):
        return mask
    sy, sx = out_h / h, out_w / w
    if mode == "nearest":
        rows = np.minimum((np.arange(out_h) / sy).astype(np.int64), h - 1)
        cols = np.minimum((np.arange(out_w) / sx).astype(np.int64), w - 1)
        return mask[rows[:, None], cols[None, :]]
    if mode == "bilinear":
        ys = (np.arange(out_h) + 0.5) / sy - 0.5
        xs = (np.arange(out_w) + 0.5) / sx - 0.5
        grid = np.meshgrid(ys, xs, indexing="ij")
        return map_coordinates(mask, grid, order=1, mode="nearest")
    raise ValueError(f"unknown upsampling mode {mode!r}")


def binarize(mask, tau: float = 0.5, size=None, mode: str = "nearest") -> BinaryMask:
    """Threshold a probability grid (``> tau``), optionally resampled to ``size=(h, w)`` first."""
    mask = np.asarray(mask, dtype=np.float64)
    if size is not None:
        mask = upsample_probs(mask, size[0], size[1], mode)
    return BinaryMask.from_dense(mask > tau)
