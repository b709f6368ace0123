"""Decode per-level proposal-head outputs into ranked thing queries.

Pipeline per image: strict-maximum NMS on every center heatmap, global ranking
of the peaks across levels, then for each kept peak a positional query read
from the regression map, an approximate mask by instance voting, and a content
query by objectness-weighted pooling of the level features inside that mask.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter

from .config import DecodeConfig
from .geometry import Box
from .rasters import LEVEL_STRIDES, BinaryMask, FeatureMap, RegressionMap, ScalarMap


class DegenerateQueryWarning(UserWarning):
    """A query was built from empty support (no mask cells or zero weights)."""


@dataclass(frozen=True)
class Peak:
    stride: int
    row: int
    col: int
    prob: float

    def sort_key(self):
        return (-self.prob, self.stride, self.row, self.col)


@dataclass(frozen=True, eq=False)
class Proposal:
    stride: int
    row: int
    col: int
    prob: float
    box: Box  # normalized image units
    content: np.ndarray
    approx_mask: BinaryMask
    size_clamped: bool = False
    empty_support: bool = False


@dataclass(frozen=True, eq=False)
class LevelHeads:
    """Head outputs at one stride: center heatmap, regression, objectness, features."""

    center: ScalarMap
    regression: RegressionMap
    objectness: ScalarMap
    features: FeatureMap

    def __post_init__(self):
        shapes = {
            (self.center.height, self.center.width),
            (self.regression.height, self.regression.width),
            (self.objectness.height, self.objectness.width),
            (self.features.height, self.features.width),
        }
        if len(shapes) != 1:
            raise ValueError(f"head grids disagree in shape: {sorted(shapes)}")
        strides = {self.center.stride, self.regression.stride, self.objectness.stride, self.features.stride}
        if len(strides) != 1:
            raise ValueError(f"head grids disagree in stride: {sorted(strides)}")

    @property
    def stride(self) -> int:
        return self.center.stride


@dataclass(frozen=True, eq=False)
class QuerySet:
    stuff: np.ndarray  # (N_st, C) opaque stuff query vectors
    things: list = field(default_factory=list)


def heatmap_nms(center: ScalarMap, window: int = 3, prob_floor: float = 0.05) -> list[Peak]:
    """Cells strictly greater than every other cell in their window.

    Plateaus yield no peak. Results are sorted by probability, descending,
    then row-major.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    data = center.data
    if window == 1:
        neighbor_max = np.full(data.shape, -np.inf)
    else:
        footprint = np.ones((window, window), dtype=bool)
        footprint[window // 2, window // 2] = False
        neighbor_max = maximum_filter(data, footprint=footprint, mode="constant", cval=-np.inf)
    keep = (data > neighbor_max) & (data > prob_floor)
    rows, cols = np.nonzero(keep)
    peaks = [Peak(center.stride, int(r), int(c), float(data[r, c])) for r, c in zip(rows, cols)]
    peaks.sort(key=Peak.sort_key)
    return peaks


def rank_and_select(per_level_peaks, n_max: int = 250) -> list[Peak]:
    """Merge peaks of all levels by probability and keep the best ``n_max``.

    Equal probabilities order by finer stride first, then row-major.
    """
    merged = [p for peaks in per_level_peaks for p in peaks]
    merged.sort(key=Peak.sort_key)
    return merged[:n_max]


def positional_query(reg: RegressionMap, row: int, col: int, image_w: float, image_h: float):
    """Normalized box regressed at cell ``(row, col)``.

    Returns ``(box, clamped)``; ``clamped`` is True when a negative size
    channel had to be clamped to zero.
    """
    if not (0 <= row < reg.height and 0 <= col < reg.width):
        raise IndexError(f"cell ({row}, {col}) outside the {reg.width}x{reg.height} grid")
    dx, dy, w, h = reg.data[row, col]
    clamped = bool(w < 0 or h < 0)
    s = reg.stride
    cx = (col + 0.5 + dx) * s
    cy = (row + 0.5 + dy) * s
    box = Box(cx, cy, max(w, 0.0) * s, max(h, 0.0) * s)
    return box.to_normalized(image_w, image_h), clamped


def _vote_labels(reg: RegressionMap, cells, theta: float, chunk: int = 1 << 16) -> np.ndarray:
    """Per-cell index into ``cells`` of the winning proposal, -1 if none within ``theta``."""
    h, w = reg.height, reg.width
    labels = np.full(h * w, -1, dtype=np.int64)
    if len(cells) == 0:
        return labels.reshape(h, w)
    centers = reg.regressed_centers().reshape(-1, 2)
    loc = np.array([[c + 0.5, r + 0.5] for r, c in cells], dtype=np.float64)
    for start in range(0, centers.shape[0], chunk):
        block = centers[start : start + chunk]
        d2 = ((block[:, None, :] - loc[None, :, :]) ** 2).sum(-1)
        best = np.argmin(d2, axis=1)  # first index wins ties
        dist = np.sqrt(d2[np.arange(block.shape[0]), best])
        labels[start : start + block.shape[0]] = np.where(dist < theta, best, -1)
    return labels.reshape(h, w)


def instance_voting(reg: RegressionMap, cells, theta: float) -> list[BinaryMask]:
    """Approximate masks by nearest-proposal voting of regressed centers.

    ``cells`` are ``(row, col)`` proposal locations on this level, in rank
    order; distance ties go to the earlier proposal, so masks are disjoint.
    """
    labels = _vote_labels(reg, cells, theta)
    return [BinaryMask.from_dense(labels == k) for k in range(len(cells))]


def content_query(features: FeatureMap, objectness: ScalarMap, mask, normalize: bool = False):
    """Objectness-weighted sum of features over the mask cells.

    With ``normalize`` the sum is divided by the total weight. Empty support
    gives a zero vector and a :class:`DegenerateQueryWarning`.
    """
    m = mask.to_dense() if hasattr(mask, "to_dense") else np.asarray(mask, dtype=bool)
    weights = objectness.data * m
    total = weights.sum()
    if total == 0:
        warnings.warn("content query pooled over zero weight", DegenerateQueryWarning, stacklevel=2)
        return np.zeros(features.channels)
    q = np.tensordot(weights, features.data, axes=([0, 1], [0, 1]))
    return q / total if normalize else q


def decode_all(heads: dict, stuff_queries=None, config: DecodeConfig = DecodeConfig(), image_size=None) -> QuerySet:
    """Full proposal decoding for one image.

    ``heads`` maps every stride in ``LEVEL_STRIDES`` to :class:`LevelHeads`.
    ``image_size`` is ``(width, height)`` in pixels and defaults to the
    stride-4 grid extent.
    """
    missing = [s for s in LEVEL_STRIDES if s not in heads]
    if missing:
        raise KeyError(f"missing pyramid levels: {missing}")
    if image_size is None:
        finest = heads[LEVEL_STRIDES[0]]
        image_size = (finest.center.width * LEVEL_STRIDES[0], finest.center.height * LEVEL_STRIDES[0])
    image_w, image_h = image_size

    per_level = [heatmap_nms(heads[s].center, config.nms_window, config.prob_floor) for s in LEVEL_STRIDES]
    selected = rank_and_select(per_level, config.n_thing)

    by_level: dict[int, list[int]] = {}
    for idx, peak in enumerate(selected):
        by_level.setdefault(peak.stride, []).append(idx)

    masks: dict[int, BinaryMask] = {}
    for stride, idxs in by_level.items():
        lh = heads[stride]
        theta = config.theta_frac * lh.regression.width
        cells = [(selected[i].row, selected[i].col) for i in idxs]
        for i, m in zip(idxs, instance_voting(lh.regression, cells, theta)):
            masks[i] = m

    things = []
    for idx, peak in enumerate(selected):
        lh = heads[peak.stride]
        box, clamped = positional_query(lh.regression, peak.row, peak.col, image_w, image_h)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", DegenerateQueryWarning)
            content = content_query(lh.features, lh.objectness, masks[idx], config.normalize_content)
        things.append(
            Proposal(
                stride=peak.stride,
                row=peak.row,
                col=peak.col,
                prob=peak.prob,
                box=box,
                content=content,
                approx_mask=masks[idx],
                size_clamped=clamped,
                empty_support=bool(caught),
            )
        )

    if stuff_queries is None:
        channels = heads[LEVEL_STRIDES[0]].features.channels
        stuff = np.zeros((0, channels))
    else:
        stuff = np.asarray(stuff_queries, dtype=np.float64)
    return QuerySet(stuff=stuff, things=things)
