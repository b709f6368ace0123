"""Synthetic scenes with known answers, for tests and experiment scripts."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box
from .mask_decode import InstancePrediction
from .ocp_decode import LevelHeads
from .rasters import LEVEL_STRIDES, BinaryMask, FeatureMap, PanopticMap, RegressionMap, ScalarMap, Segment
from .targets import GtInstance, level_range, level_shape


@dataclass(frozen=True)
class PlantedObject:
    """An object planted exactly on one level: center cell plus sub-cell offset, size in cells."""

    stride: int
    row: int
    col: int
    dx: float
    dy: float
    w: float
    h: float

    @property
    def center_cells(self) -> tuple[float, float]:
        return self.col + 0.5 + self.dx, self.row + 0.5 + self.dy

    def box_px(self) -> Box:
        s = self.stride
        return Box((self.col + 0.5 + self.dx) * s, (self.row + 0.5 + self.dy) * s, self.w * s, self.h * s)

    def cell_footprint(self, map_h: int, map_w: int) -> np.ndarray:
        """Cells whose centers fall inside the object box, always including the center cell."""
        cx, cy = self.center_cells
        xs = np.arange(map_w) + 0.5
        ys = np.arange(map_h) + 0.5
        inside = (np.abs(ys - cy)[:, None] <= self.h / 2) & (np.abs(xs - cx)[None, :] <= self.w / 2)
        inside[self.row, self.col] = True
        return inside


def gaussian_peaks(cells, map_h: int, map_w: int, sigma2: float = 1.0, truncate: float = 4.0):
    out = np.zeros((map_h, map_w))
    ys, xs = np.mgrid[0:map_h, 0:map_w]
    for r, c in cells:
        d2 = (ys - r) ** 2 + (xs - c) ** 2
        g = np.where(d2 <= (truncate**2) * sigma2, np.exp(-0.5 * d2 / sigma2), 0.0)
        np.maximum(out, g, out=out)
    return out


def planted_heads(objects, image_w: int, image_h: int, channels: int = 8, seed: int = 0) -> dict:
    """Head outputs that decode exactly to ``objects``.

    Centers are unit Gaussian peaks, regression fields are exact over each
    object's cell footprint (smaller objects painted last), objectness is 1 on
    footprints, features are seeded noise.
    """
    rng = np.random.default_rng(seed)
    heads = {}
    for stride in LEVEL_STRIDES:
        h, w = level_shape(image_h, image_w, stride)
        mine = sorted((o for o in objects if o.stride == stride), key=lambda o: -(o.w * o.h))
        reg = np.zeros((h, w, 4))
        obj = np.zeros((h, w))
        xs = np.arange(w) + 0.5
        ys = np.arange(h) + 0.5
        for o in mine:
            cells = o.cell_footprint(h, w)
            cx, cy = o.center_cells
            rows, cols = np.nonzero(cells)
            reg[rows, cols, 0] = cx - xs[cols]
            reg[rows, cols, 1] = cy - ys[rows]
            reg[rows, cols, 2] = o.w
            reg[rows, cols, 3] = o.h
            obj[cells] = 1.0
        center = gaussian_peaks([(o.row, o.col) for o in mine], h, w)
        feats = rng.standard_normal((h, w, channels))
        heads[stride] = LevelHeads(
            ScalarMap(stride, center),
            RegressionMap(stride, reg),
            ScalarMap(stride, obj),
            FeatureMap(stride, feats),
        )
    return heads


def random_planted_objects(k: int, image_w: int, image_h: int, rng: np.random.Generator, max_tries: int = 10_000):
    """``k`` objects spread over the levels, each with a diagonal inside its level's range.

    Objects sharing a level keep their center cells at Chebyshev distance >= 2
    and never sit inside another same-level footprint, so every center is a
    strict local maximum and reads back its own regression.
    """
    objects: list[PlantedObject] = []
    tries = 0
    while len(objects) < k:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"could not place {k} objects")
        stride = int(rng.choice(LEVEL_STRIDES))
        rng_range = level_range(stride)
        map_h, map_w = level_shape(image_h, image_w, stride)
        hi = min(rng_range.d_max, math.hypot(image_w, image_h) * 0.9)
        if rng_range.d_min >= hi:
            continue
        diag = rng.uniform(max(rng_range.d_min, 1.0), hi)
        angle = rng.uniform(0.2, 1.37)
        w = diag * math.cos(angle) / stride
        h = diag * math.sin(angle) / stride
        cand = PlantedObject(
            stride,
            int(rng.integers(map_h)),
            int(rng.integers(map_w)),
            float(rng.uniform(-0.45, 0.45)),
            float(rng.uniform(-0.45, 0.45)),
            float(w),
            float(h),
        )
        ok = True
        for o in objects:
            if o.stride != stride:
                continue
            if max(abs(o.row - cand.row), abs(o.col - cand.col)) < 2:
                ok = False
                break
            if o.cell_footprint(map_h, map_w)[cand.row, cand.col] or cand.cell_footprint(map_h, map_w)[o.row, o.col]:
                ok = False
                break
        if ok:
            objects.append(cand)
    return objects


def random_panoptic_map(rng: np.random.Generator, height: int, width: int, n_segments: int,
                        n_classes: int = 4, thing_classes=(0, 1), void_frac: float = 0.1) -> PanopticMap:
    """Random rectangles painted in order over a void background, ids 1..n."""
    ids = np.zeros((height, width), dtype=np.int64)
    table = {}
    for sid in range(1, n_segments + 1):
        y0, y1 = sorted(rng.integers(0, height + 1, size=2))
        x0, x1 = sorted(rng.integers(0, width + 1, size=2))
        if y1 == y0:
            y1 = min(y0 + 1, height)
            y0 = y1 - 1
        if x1 == x0:
            x1 = min(x0 + 1, width)
            x0 = x1 - 1
        ids[y0:y1, x0:x1] = sid
        cls = int(rng.integers(n_classes))
        table[sid] = Segment(cls, cls in thing_classes)
    if void_frac > 0:
        ids[rng.random((height, width)) < void_frac] = 0
    present = set(np.unique(ids).tolist())
    return PanopticMap(ids, {k: v for k, v in table.items() if k in present})


def perturb_panoptic_map(pmap: PanopticMap, rng: np.random.Generator, flip_frac: float = 0.2,
                         relabel_prob: float = 0.2, n_classes: int = 4, thing_classes=(0, 1)) -> PanopticMap:
    """A noisy copy: some pixels reassigned to random ids, some classes changed, ids shuffled."""
    ids = pmap.ids.copy()
    seg_ids = sorted(pmap.segments)
    choices = np.array([0] + seg_ids)
    flip = rng.random(ids.shape) < flip_frac
    ids[flip] = rng.choice(choices, size=int(flip.sum()))
    table = {}
    for sid in seg_ids:
        seg = pmap.segments[sid]
        if rng.random() < relabel_prob:
            cls = int(rng.integers(n_classes))
            seg = Segment(cls, cls in thing_classes)
        table[sid] = seg
    perm = rng.permutation(len(seg_ids)) + 1
    remap = {old: int(new) for old, new in zip(seg_ids, perm)}
    out = np.zeros_like(ids)
    for old, new in remap.items():
        out[ids == old] = new
    present = set(np.unique(out).tolist())
    return PanopticMap(out, {remap[k]: v for k, v in table.items() if remap[k] in present})


DRIFT_IMAGE = (100, 100)


def drift_scene():
    """Three thing queries against two GTs on a 100x100 image.

    GT 0 (class 0) covers [10, 50)^2 and GT 1 (class 1) covers [60, 90)^2.
    Queries 0 and 1 both sit on GT 0 (box IoU 38/42 and 37/43) and are
    confident in class 0. Query 2 is confident in class 1 but its box has
    drifted off GT 1 (IoU 125/1225), so the class term pulls it onto GT 1 in
    the base assignment. Masks are uniform 0.5 so they do not steer the match.
    """
    w, h = DRIFT_IMAGE
    gts = []
    for cls, (x1, y1, x2, y2) in enumerate([(10, 10, 50, 50), (60, 60, 90, 90)]):
        m = np.zeros((h, w), bool)
        m[y1:y2, x1:x2] = True
        gts.append(GtInstance(cls, True, BinaryMask.from_dense(m)))
    grid = np.full((h // 4, w // 4), 0.5)
    boxes = [(12, 10, 52, 50), (10, 13, 50, 53), (55, 85, 85, 100)]
    probs = [(0.95, 0.05), (0.95, 0.05), (0.05, 0.95)]
    preds = [
        InstancePrediction(np.array(p), Box.from_corners(*b).to_normalized(w, h), grid.copy())
        for b, p in zip(boxes, probs)
    ]
    return preds, gts
