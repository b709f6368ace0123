"""Dense grid containers and the run-length mask codec.

All grids are row-major numpy arrays indexed ``[row, col]``. A level-grid cell
``(i, j)`` covers image pixels ``[j*s, (j+1)*s) x [i*s, (i+1)*s)`` and its
center sits at image coordinate ``((j + 0.5) * s, (i + 0.5) * s)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LEVEL_STRIDES = (4, 8, 16, 32, 64)


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """``(H, W, C)`` feature grid at one pyramid stride."""

    stride: int
    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data, np.float64)
        if data.ndim != 3:
            raise ValueError(f"FeatureMap data must be (H, W, C), got shape {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class ScalarMap:
    """One scalar per cell: center heatmaps, objectness, targets."""

    stride: int
    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data, np.float64)
        if data.ndim != 2:
            raise ValueError(f"ScalarMap data must be (H, W), got shape {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def is_probability(self) -> bool:
        return bool(np.all((self.data >= 0.0) & (self.data <= 1.0)))


@dataclass(frozen=True, eq=False)
class RegressionMap:
    """``(H, W, 4)`` grid of ``(dx, dy, w, h)`` in level-cell units.

    ``(dx, dy)`` is the offset from the cell center to the object center.
    """

    stride: int
    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data, np.float64)
        if data.ndim != 3 or data.shape[2] != 4:
            raise ValueError(f"RegressionMap data must be (H, W, 4), got shape {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def regressed_centers(self) -> np.ndarray:
        """``(H, W, 2)`` regressed object centers ``(x, y)`` in cell coordinates."""
        h, w = self.data.shape[:2]
        xs = np.arange(w, dtype=np.float64) + 0.5
        ys = np.arange(h, dtype=np.float64) + 0.5
        cx = xs[None, :] + self.data[..., 0]
        cy = ys[:, None] + self.data[..., 1]
        return np.stack([cx, cy], axis=-1)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Run-length encoded binary mask.

    ``runs`` is a ``(K, 2)`` array of ``(start, length)`` over the row-major
    flattening, sorted, non-overlapping, non-adjacent, every length > 0.
    """

    height: int
    width: int
    runs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        runs = _frozen(np.asarray(self.runs, dtype=np.int64).reshape(-1, 2), np.int64)
        object.__setattr__(self, "runs", runs)
        if runs.size:
            starts, lengths = runs[:, 0], runs[:, 1]
            ends = starts + lengths
            if (
                np.any(lengths <= 0)
                or starts[0] < 0
                or ends[-1] > self.height * self.width
                or np.any(starts[1:] <= ends[:-1])
            ):
                raise ValueError("RLE runs must be sorted, disjoint, positive and within bounds")

    @classmethod
    def from_dense(cls, mask: np.ndarray) -> "BinaryMask":
        return rle_encode(mask)

    @classmethod
    def empty(cls, height: int, width: int) -> "BinaryMask":
        return cls(height, width)

    def to_dense(self) -> np.ndarray:
        return rle_decode(self)

    @property
    def area(self) -> int:
        return int(self.runs[:, 1].sum()) if self.runs.size else 0

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return (
            self.height == other.height
            and self.width == other.width
            and np.array_equal(self.runs, other.runs)
        )

    def __hash__(self):
        return hash((self.height, self.width, self.runs.tobytes()))

    def to_counts(self) -> list[int]:
        """Flat ``[start0, len0, start1, len1, ...]`` list for JSON."""
        return [int(v) for v in self.runs.reshape(-1)]

    @classmethod
    def from_counts(cls, height: int, width: int, counts) -> "BinaryMask":
        counts = list(counts)
        if len(counts) % 2:
            raise ValueError("RLE counts must hold (start, length) pairs")
        return cls(int(height), int(width), np.asarray(counts, dtype=np.int64).reshape(-1, 2))


def rle_encode(mask: np.ndarray) -> BinaryMask:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    flat = mask.reshape(-1).astype(bool)
    padded = np.concatenate([[False], flat, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    starts, stops = edges[0::2], edges[1::2]
    runs = np.stack([starts, stops - starts], axis=1) if starts.size else np.zeros((0, 2))
    return BinaryMask(mask.shape[0], mask.shape[1], runs)


def rle_decode(mask: BinaryMask) -> np.ndarray:
    flat = np.zeros(mask.height * mask.width, dtype=bool)
    for start, length in mask.runs:
        flat[start : start + length] = True
    return flat.reshape(mask.height, mask.width)


def bilinear_read(fmap: FeatureMap, x: float, y: float) -> np.ndarray:
    """Channel vector at continuous cell-index coordinates ``(x, y)``.

    Integer ``(x, y)`` addresses cell ``[y, x]`` exactly. An image coordinate
    ``u`` in pixels maps to ``u / stride - 0.5``.
    """
    h, w = fmap.height, fmap.width
    if not (0.0 <= x < w and 0.0 <= y < h):
        raise IndexError(f"coordinate ({x}, {y}) outside the {w}x{h} grid")
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    d = fmap.data
    top = d[y0, x0] * (1.0 - fx) + d[y0, x1] * fx
    bottom = d[y1, x0] * (1.0 - fx) + d[y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def downsample_any(mask: np.ndarray, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Level-grid occupancy: a cell is set if any pixel of its block is set."""
    mask = np.asarray(mask, dtype=bool)
    full = np.zeros((out_h * stride, out_w * stride), dtype=bool)
    h = min(mask.shape[0], full.shape[0])
    w = min(mask.shape[1], full.shape[1])
    full[:h, :w] = mask[:h, :w]
    return full.reshape(out_h, stride, out_w, stride).any(axis=(1, 3))


@dataclass(frozen=True)
class Segment:
    class_id: int
    is_thing: bool


class PanopticMapError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PanopticMap:
    """Per-pixel segment ids (0 = void) plus a segment table ``id -> Segment``."""

    ids: np.ndarray
    segments: dict

    def __post_init__(self):
        ids = _frozen(self.ids, np.int64)
        if ids.ndim != 2:
            raise PanopticMapError(f"segment-id raster must be 2-D, got shape {ids.shape}")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "segments", {int(k): v for k, v in self.segments.items()})
        self.validate()

    def validate(self) -> None:
        if 0 in self.segments:
            raise PanopticMapError("segment id 0 is reserved for void")
        present = np.unique(self.ids)
        missing = [int(v) for v in present if v != 0 and int(v) not in self.segments]
        if missing:
            raise PanopticMapError(f"pixel ids {missing} have no entry in the segment table")

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    def segment_mask(self, seg_id: int) -> np.ndarray:
        return self.ids == seg_id

    def areas(self) -> dict[int, int]:
        values, counts = np.unique(self.ids, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts) if v != 0}

    def __eq__(self, other):
        if not isinstance(other, PanopticMap):
            return NotImplemented
        return np.array_equal(self.ids, other.ids) and self.segments == other.segments

    @classmethod
    def from_segment_masks(cls, height: int, width: int, entries) -> "PanopticMap":
        """Build from ``(segment_id, Segment, BinaryMask)`` triples; later entries overwrite."""
        ids = np.zeros((height, width), dtype=np.int64)
        table = {}
        for seg_id, seg, mask in entries:
            ids[mask.to_dense()] = seg_id
            table[int(seg_id)] = seg
        present = set(np.unique(ids).tolist())
        table = {k: v for k, v in table.items() if k in present}
        return cls(ids, table)
