"""Axis-aligned box arithmetic.

Boxes are stored center-size ``(cx, cy, w, h)``. A box is either in pixel
units or normalized to ``[0, 1]`` by the image size; mixing the two is an
error. Array helpers operate on ``(N, 4)`` center-size arrays and are what the
hot paths (NMS, matching) use; :class:`Box` is the scalar value type.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Floor for union/hull areas so degenerate boxes never divide by zero.
AREA_EPS = 1e-9


class UnitsMismatchError(ValueError):
    """Raised when a pixel box is combined with a normalized one."""


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float
    normalized: bool = False

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"box extents must be nonnegative, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1, y1, x2, y2, normalized=False) -> "Box":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1, normalized)

    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.w, self.h))

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    def to_normalized(self, image_w: float, image_h: float) -> "Box":
        if self.normalized:
            return self
        return Box(self.cx / image_w, self.cy / image_h, self.w / image_w, self.h / image_h, True)

    def to_pixels(self, image_w: float, image_h: float) -> "Box":
        if not self.normalized:
            return self
        return Box(self.cx * image_w, self.cy * image_h, self.w * image_w, self.h * image_h, False)


def _check_units(a: Box, b: Box) -> None:
    if a.normalized != b.normalized:
        raise UnitsMismatchError("cannot compare a normalized box with a pixel box")


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2.0
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.concatenate(
        [(boxes[..., :2] + boxes[..., 2:]) / 2.0, boxes[..., 2:] - boxes[..., :2]], axis=-1
    )


def _pairwise_terms(a: np.ndarray, b: np.ndarray):
    a = cxcywh_to_xyxy(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    b = cxcywh_to_xyxy(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])

    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter

    hull_lt = np.minimum(a[:, None, :2], b[None, :, :2])
    hull_rb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    hull_wh = np.clip(hull_rb - hull_lt, 0.0, None)
    hull = hull_wh[..., 0] * hull_wh[..., 1]
    return inter, union, hull


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between two ``(N, 4)`` / ``(M, 4)`` center-size arrays."""
    inter, union, _ = _pairwise_terms(a, b)
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > AREA_EPS)
    return out


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    inter, union, hull = _pairwise_terms(a, b)
    iou = np.zeros_like(inter)
    np.divide(inter, union, out=iou, where=union > AREA_EPS)
    union = np.maximum(union, AREA_EPS)
    hull = np.maximum(hull, AREA_EPS)
    return iou - (hull - union) / hull


def iou(a: Box, b: Box) -> float:
    _check_units(a, b)
    return float(pairwise_iou(a.as_array(), b.as_array())[0, 0])


def giou(a: Box, b: Box) -> float:
    """Generalized IoU: IoU minus the fraction of the hull not covered by the union."""
    _check_units(a, b)
    return float(pairwise_giou(a.as_array(), b.as_array())[0, 0])


def dilation_margins(w: float, h: float, ratio: float = 0.1, cap: float = 2.0, mode: str = "min"):
    """Per-axis dilation in pixels for a box of size ``(w, h)`` pixels.

    ``mode="min"`` gives ``min(ratio * w, cap)``; ``mode="max"`` swaps in
    ``max`` for experiments where the cap acts as a floor instead.
    """
    if mode == "min":
        pick = min
    elif mode == "max":
        pick = max
    else:
        raise ValueError(f"unknown dilation mode {mode!r}")
    return pick(ratio * w, cap), pick(ratio * h, cap)


def dilate(
    b: Box,
    image_w: float,
    image_h: float,
    ratio: float = 0.1,
    cap: float = 2.0,
    mode: str = "min",
) -> Box:
    """Grow a pixel box by its dilation margins on every side, then clip to the image."""
    if b.normalized:
        raise UnitsMismatchError("dilate expects a box in pixel units")
    eps_w, eps_h = dilation_margins(b.w, b.h, ratio, cap, mode)
    x1, y1, x2, y2 = b.corners()
    x1 = min(max(x1 - eps_w, 0.0), image_w)
    y1 = min(max(y1 - eps_h, 0.0), image_h)
    x2 = min(max(x2 + eps_w, 0.0), image_w)
    y2 = min(max(y2 + eps_h, 0.0), image_h)
    return Box.from_corners(x1, y1, x2, y2)


def mask_to_box(mask: np.ndarray) -> Box | None:
    """Tight pixel box around the nonzero pixels of a 2-D mask (pixel edges, not centers)."""
    ys = np.flatnonzero(mask.any(axis=1))
    if ys.size == 0:
        return None
    xs = np.flatnonzero(mask.any(axis=0))
    return Box.from_corners(float(xs[0]), float(ys[0]), float(xs[-1] + 1), float(ys[-1] + 1))
