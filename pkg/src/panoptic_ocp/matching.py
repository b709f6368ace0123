"""Query/ground-truth assignment.

Standard one-to-one Hungarian matching on a class + mask + box cost, followed
by a two-stage proposal-aware refinement for thing queries:

* stage 1 drops base matches whose box IoU is below ``theta_fp``;
* stage 2 gives every query left unmatched its best-overlap GT when that
  overlap exceeds ``theta_fn``, so several queries may supervise one GT.

Also hosts mask-conditioned query sampling for training and the greedy box
NMS used at test time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .config import LossConfig, LossWeights, MatchConfig
from .geometry import Box, pairwise_giou, pairwise_iou
from .rasters import bilinear_read, downsample_any

BASE = "base"
REMOVED = "removed-stage1"
ADDED = "added-stage2"


@dataclass(frozen=True, eq=False)
class CostMatrix:
    """Weighted total cost plus the unweighted per-term matrices."""

    total: np.ndarray
    class_cost: np.ndarray
    mask_cost: np.ndarray
    box_cost: np.ndarray
    weights: LossWeights = LossWeights()

    @property
    def shape(self):
        return self.total.shape


@dataclass(frozen=True)
class Match:
    query: int
    gt: int
    iou: float
    stage: str = BASE


@dataclass
class MatchSet:
    matches: list = field(default_factory=list)
    removed: list = field(default_factory=list)
    unmatched_queries: list = field(default_factory=list)
    unmatched_gts: list = field(default_factory=list)

    def pairs(self) -> list[tuple[int, int]]:
        return [(m.query, m.gt) for m in self.matches]

    def to_dict(self) -> dict:
        def rec(m):
            return {"query": m.query, "gt": m.gt, "iou": m.iou, "stage": m.stage}

        return {
            "matches": [rec(m) for m in self.matches],
            "removed": [rec(m) for m in self.removed],
            "unmatched_queries": list(self.unmatched_queries),
            "unmatched_gts": list(self.unmatched_gts),
        }


def _gt_boxes_normalized(gts, image_w, image_h) -> np.ndarray:
    if not gts:
        return np.zeros((0, 4))
    return np.stack([g.box.to_normalized(image_w, image_h).as_array() for g in gts])


def _pred_boxes(preds) -> np.ndarray:
    if not preds:
        return np.zeros((0, 4))
    return np.stack([p.box.as_array() for p in preds])


def _sample_gt_mask(mask: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """GT mask at the prediction grid, sampled at the pixel under each cell center."""
    h, w = mask.shape
    if (h, w) == (grid_h, grid_w):
        return mask
    rows = np.minimum(((np.arange(grid_h) + 0.5) * h / grid_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(grid_w) + 0.5) * w / grid_w).astype(np.int64), w - 1)
    return mask[rows[:, None], cols[None, :]]


def _stack_masks(preds, gts):
    grid_h, grid_w = preds[0].mask.shape
    P = np.stack([np.asarray(p.mask, dtype=np.float64).reshape(-1) for p in preds])
    T = np.stack(
        [_sample_gt_mask(g.mask.to_dense(), grid_h, grid_w).reshape(-1).astype(np.float64) for g in gts]
    )
    return P, T


def build_cost(preds, gts, image_w, image_h, weights=LossWeights(), config=LossConfig()) -> CostMatrix:
    """``n_queries x n_gt`` matching cost.

    Entry ``(i, j)`` is ``lambda_cls (1 - y_i[c_j]) + lambda_mask L_mask +
    lambda_box L_box`` with the mask term evaluated on the prediction grid.
    """
    n, m = len(preds), len(gts)
    if n == 0 or m == 0:
        z = np.zeros((n, m))
        return CostMatrix(z, z.copy(), z.copy(), z.copy(), weights)

    classes = np.array([g.class_id for g in gts])
    probs = np.stack([np.asarray(p.class_probs, dtype=np.float64) for p in preds])
    class_cost = 1.0 - probs[:, classes]

    P, T = _stack_masks(preds, gts)
    Pc = np.clip(P, config.prob_clamp, 1.0 - config.prob_clamp)
    bce = -(np.log(Pc) @ T.T + np.log(1.0 - Pc) @ (1.0 - T).T) / P.shape[1]
    s = config.dice_smooth
    dice = 1.0 - (2.0 * (P @ T.T) + s) / (P.sum(1)[:, None] + T.sum(1)[None, :] + s)
    mask_cost = bce + dice

    pb, gb = _pred_boxes(preds), _gt_boxes_normalized(gts, image_w, image_h)
    l1 = np.abs(pb[:, None, :] - gb[None, :, :]).sum(-1)
    box_cost = l1 + (1.0 - pairwise_giou(pb, gb))

    total = weights.lambda_cls * class_cost + weights.lambda_mask * mask_cost + weights.lambda_box * box_cost
    return CostMatrix(total, class_cost, mask_cost, box_cost, weights)


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost maximal one-to-one matching of a rectangular matrix.

    Returns ``(row, col)`` pairs sorted by row.
    """
    a = np.asarray(getattr(cost, "total", cost), dtype=np.float64)
    n, m = a.shape
    if n == 0 or m == 0:
        return []
    if not np.all(np.isfinite(a)):
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(a)
    return [(int(i), int(j)) for i, j in zip(rows, cols)]


def base_matches(pairs, n_queries: int, n_gts: int, iou_matrix: np.ndarray) -> MatchSet:
    matches = [Match(q, g, float(iou_matrix[q, g]), BASE) for q, g in pairs]
    used_q = {q for q, _ in pairs}
    used_g = {g for _, g in pairs}
    return MatchSet(
        matches=matches,
        unmatched_queries=[q for q in range(n_queries) if q not in used_q],
        unmatched_gts=[g for g in range(n_gts) if g not in used_g],
    )


def refine_with_overlap(base: MatchSet, box_iou, config: MatchConfig = MatchConfig(), stage2_overlap=None) -> MatchSet:
    """Apply the two refinement stages given precomputed overlap matrices.

    ``box_iou`` drives stage 1; ``stage2_overlap`` (defaults to ``box_iou``)
    drives stage 2.
    """
    box_iou = np.asarray(box_iou, dtype=np.float64)
    s2 = box_iou if stage2_overlap is None else np.asarray(stage2_overlap, dtype=np.float64)
    n_q, n_g = box_iou.shape

    kept, removed = [], []
    for mt in base.matches:
        iou = float(box_iou[mt.query, mt.gt])
        if iou < config.theta_fp:
            removed.append(Match(mt.query, mt.gt, iou, REMOVED))
        else:
            kept.append(Match(mt.query, mt.gt, iou, mt.stage))

    matched_q = {mt.query for mt in kept}
    added = []
    if n_g:
        for q in range(n_q):
            if q in matched_q:
                continue
            g = int(np.argmax(s2[q]))  # first GT wins ties
            if s2[q, g] > config.theta_fn:
                added.append(Match(q, g, float(s2[q, g]), ADDED))

    matches = sorted(kept + added, key=lambda mt: mt.query)
    used_q = {mt.query for mt in matches}
    used_g = {mt.gt for mt in matches}
    return MatchSet(
        matches=matches,
        removed=removed,
        unmatched_queries=[q for q in range(n_q) if q not in used_q],
        unmatched_gts=[g for g in range(n_g) if g not in used_g],
    )


def mask_iou_matrix(preds, gts, threshold: float = 0.5) -> np.ndarray:
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)))
    P, T = _stack_masks(preds, gts)
    P = (P > threshold).astype(np.float64)
    inter = P @ T.T
    union = P.sum(1)[:, None] + T.sum(1)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def refine_matches(base: MatchSet, preds, gts, image_w, image_h, config: MatchConfig = MatchConfig()) -> MatchSet:
    box_iou = pairwise_iou(_pred_boxes(preds), _gt_boxes_normalized(gts, image_w, image_h))
    s2 = None
    if config.stage2_overlap == "mask":
        s2 = mask_iou_matrix(preds, gts)
    elif config.stage2_overlap != "box":
        raise ValueError(f"unknown stage-2 overlap {config.stage2_overlap!r}")
    return refine_with_overlap(base, box_iou, config, s2)


def match_things(preds, gts, image_w, image_h, config=MatchConfig(), weights=LossWeights(),
                 loss=LossConfig(), refine=True) -> MatchSet:
    """Hungarian matching of thing queries to thing GTs, optionally refined."""
    cost = build_cost(preds, gts, image_w, image_h, weights, loss)
    box_iou = pairwise_iou(_pred_boxes(preds), _gt_boxes_normalized(gts, image_w, image_h))
    base = base_matches(hungarian(cost), len(preds), len(gts), box_iou)
    if not refine:
        return base
    return refine_matches(base, preds, gts, image_w, image_h, config)


def match_stuff(preds, gts, image_w, image_h, weights=LossWeights(), loss=LossConfig()) -> MatchSet:
    cost = build_cost(preds, gts, image_w, image_h, weights, loss)
    box_iou = pairwise_iou(_pred_boxes(preds), _gt_boxes_normalized(gts, image_w, image_h))
    return base_matches(hungarian(cost), len(preds), len(gts), box_iou)


@dataclass(frozen=True, eq=False)
class ConditionedQuery:
    content: np.ndarray
    box: Box  # normalized
    gt: int
    stride: int
    row: int
    col: int


class EmptySampleError(ValueError):
    """A GT mask vanished at every pyramid level."""


def perturb_box(box: Box, rng: np.random.Generator, shift: float, scale: float) -> Box:
    """Shift the center by up to ``shift * (w, h) / 2`` and scale the size by ``[1-scale, 1+scale]``."""
    dx, dy = rng.uniform(-1.0, 1.0, size=2) * shift * np.array([box.w, box.h]) / 2.0
    sw, sh = rng.uniform(1.0 - scale, 1.0 + scale, size=2)
    cx = min(max(box.cx + dx, 0.0), 1.0)
    cy = min(max(box.cy + dy, 0.0), 1.0)
    return Box(cx, cy, box.w * sw, box.h * sh, normalized=True)


def mask_conditioned_queries(gts, pyramid: dict, image_w, image_h, n: int = 100,
                             config: MatchConfig = MatchConfig(), seed: int = 0) -> list[ConditionedQuery]:
    """Training queries sampled from inside GT masks.

    Each sample picks a GT and a pyramid level uniformly, then a uniform cell
    of the GT mask at that level, and reads the level feature there as content
    query. The positional query is the GT box, randomly shifted and rescaled.
    """
    if n > config.n_dn:
        raise ValueError(f"asked for {n} conditioned queries, limit is {config.n_dn}")
    if not gts or n == 0:
        return []
    rng = np.random.default_rng(seed)
    strides = sorted(pyramid)
    dense = [g.mask.to_dense() for g in gts]
    out = []
    for _ in range(n):
        k = int(rng.integers(len(gts)))
        order = [strides[int(i)] for i in rng.permutation(len(strides))]
        for stride in order:
            fmap = pyramid[stride]
            cells = np.argwhere(downsample_any(dense[k], stride, fmap.height, fmap.width))
            if len(cells):
                break
        else:
            raise EmptySampleError(f"GT {k} has no cells at any pyramid level")
        row, col = (int(v) for v in cells[int(rng.integers(len(cells)))])
        content = bilinear_read(fmap, float(col), float(row))
        box = gts[k].box.to_normalized(image_w, image_h)
        if config.box_shift or config.box_scale:
            box = perturb_box(box, rng, config.box_shift, config.box_scale)
        out.append(ConditionedQuery(content, box, k, stride, row, col))
    return out


def test_time_nms(preds, iou_thresh: float = 0.7) -> list[int]:
    """Greedy box NMS by confidence; returns kept indices, most confident first.

    Equal confidences keep input order.
    """
    if not preds:
        return []
    conf = np.array([p.confidence for p in preds])
    order = sorted(range(len(preds)), key=lambda i: (-conf[i], i))
    ious = pairwise_iou(_pred_boxes(preds), _pred_boxes(preds))
    kept: list[int] = []
    for i in order:
        if all(ious[i, j] <= iou_thresh for j in kept):
            kept.append(i)
    return kept


test_time_nms.__test__ = False  # keep pytest from collecting the name
