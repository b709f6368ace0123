"""Supervision targets for the per-level proposal heads.

Each pyramid level is responsible for objects whose box diagonal (in image
pixels) falls inside its size range. In-range objects get a Gaussian peak in
the center target plus regression/objectness supervision; out-of-range objects
are supervised as 0 in the center target and ignored by the regression and
objectness losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import TargetConfig
from .geometry import Box, mask_to_box
from .rasters import BinaryMask, RegressionMap, ScalarMap, downsample_any


@dataclass(frozen=True)
class GtInstance:
    class_id: int
    is_thing: bool
    mask: BinaryMask

    def __post_init__(self):
        if self.mask.area == 0:
            raise ValueError("ground-truth instance mask must be non-empty")

    @property
    def box(self) -> Box:
        return mask_to_box(self.mask.to_dense())

    @property
    def diagonal(self) -> float:
        return self.box.diagonal

    @property
    def area(self) -> int:
        return self.mask.area


@dataclass(frozen=True)
class LevelSizeRange:
    stride: int
    d_min: float
    d_max: float

    def __post_init__(self):
        if not self.d_min < self.d_max:
            raise ValueError("d_min must be below d_max")

    def contains(self, diagonal: float) -> bool:
        return self.d_min <= diagonal <= self.d_max


_LEVEL_TABLE = (
    (4, 0.0, 64.0),
    (8, 32.0, 128.0),
    (16, 64.0, 256.0),
    (32, 128.0, 512.0),
    (64, 256.0, math.inf),
)


def level_ranges() -> list[LevelSizeRange]:
    """Per-stride diagonal ranges, finest level first; bounds are inclusive."""
    return [LevelSizeRange(s, lo, hi) for s, lo, hi in _LEVEL_TABLE]


def level_range(stride: int) -> LevelSizeRange:
    for r in level_ranges():
        if r.stride == stride:
            return r
    raise KeyError(f"no size range for stride {stride}")


def center_cell(box: Box, stride: int, map_h: int, map_w: int) -> tuple[int, int]:
    """``(row, col)`` of the level cell containing the box center."""
    col = min(max(int(math.floor(box.cx / stride)), 0), map_w - 1)
    row = min(max(int(math.floor(box.cy / stride)), 0), map_h - 1)
    return row, col


def center_targets(
    instances,
    level: LevelSizeRange,
    map_h: int,
    map_w: int,
    config: TargetConfig = TargetConfig(),
) -> ScalarMap:
    """Max-combined Gaussians at the center cells of in-range thing instances.

    The Gaussian is evaluated in level-cell units around the cell holding the
    box center, so that cell carries exactly 1.0. Support is cut at
    ``truncate_sigmas`` standard deviations.
    """
    out = np.zeros((map_h, map_w), dtype=np.float64)
    sigma = math.sqrt(config.sigma2)
    cutoff = config.truncate_sigmas * sigma
    r = int(math.floor(cutoff))
    offs = np.arange(-r, r + 1, dtype=np.float64)
    d2 = offs[:, None] ** 2 + offs[None, :] ** 2
    kernel = np.where(d2 <= cutoff**2, np.exp(-0.5 * d2 / config.sigma2), 0.0)

    for inst in instances:
        if not inst.is_thing:
            continue
        box = inst.box
        if not level.contains(box.diagonal):
            continue
        row, col = center_cell(box, level.stride, map_h, map_w)
        y0, y1 = max(row - r, 0), min(row + r + 1, map_h)
        x0, x1 = max(col - r, 0), min(col + r + 1, map_w)
        patch = kernel[y0 - row + r : y1 - row + r, x0 - col + r : x1 - col + r]
        np.maximum(out[y0:y1, x0:x1], patch, out=out[y0:y1, x0:x1])
    return ScalarMap(level.stride, out)


def _ownership(instances, stride: int, map_h: int, map_w: int) -> np.ndarray:
    """Index of the instance owning each level cell, -1 for none.

    Things take precedence over stuff; among the same kind the instance with
    the smaller pixel area wins, then the earlier one.
    """
    owner = np.full((map_h, map_w), -1, dtype=np.int64)
    order = sorted(
        range(len(instances)),
        key=lambda k: (not instances[k].is_thing, instances[k].area, k),
        reverse=True,
    )
    # Paint lowest precedence first so higher precedence overwrites.
    for k in order:
        cells = downsample_any(instances[k].mask.to_dense(), stride, map_h, map_w)
        owner[cells] = k
    return owner


def regression_objectness_targets(instances, level: LevelSizeRange, map_h: int, map_w: int):
    """Regression, objectness and ignore targets for one level.

    Returns ``(RegressionMap, ScalarMap, BinaryMask)``. Regression is
    supervised exactly where the objectness target is 1.
    """
    stride = level.stride
    owner = _ownership(instances, stride, map_h, map_w)
    reg = np.zeros((map_h, map_w, 4), dtype=np.float64)
    obj = np.zeros((map_h, map_w), dtype=np.float64)
    ignore = np.zeros((map_h, map_w), dtype=bool)
    xs = np.arange(map_w, dtype=np.float64) + 0.5
    ys = np.arange(map_h, dtype=np.float64) + 0.5

    for k, inst in enumerate(instances):
        cells = owner == k
        if not cells.any() or not inst.is_thing:
            continue
        box = inst.box
        if not level.contains(box.diagonal):
            ignore |= cells
            continue
        obj[cells] = 1.0
        rows, cols = np.nonzero(cells)
        reg[rows, cols, 0] = box.cx / stride - xs[cols]
        reg[rows, cols, 1] = box.cy / stride - ys[rows]
        reg[rows, cols, 2] = box.w / stride
        reg[rows, cols, 3] = box.h / stride

    return RegressionMap(stride, reg), ScalarMap(stride, obj), BinaryMask.from_dense(ignore)


@dataclass(frozen=True, eq=False)
class OcpTargets:
    stride: int
    center: ScalarMap
    regression: RegressionMap
    objectness: ScalarMap
    ignore: BinaryMask


def level_shape(image_h: int, image_w: int, stride: int) -> tuple[int, int]:
    return -(-image_h // stride), -(-image_w // stride)


def build_ocp_targets(instances, image_h: int, image_w: int, config: TargetConfig = TargetConfig()):
    """Targets for every level, keyed by stride."""
    out = {}
    for level in level_ranges():
        h, w = level_shape(image_h, image_w, level.stride)
        center = center_targets(instances, level, h, w, config)
        reg, obj, ignore = regression_objectness_targets(instances, level, h, w)
        out[level.stride] = OcpTargets(level.stride, center, reg, obj, ignore)
    return out
