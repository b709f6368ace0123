"""Scalar loss evaluators.

These are plain numpy evaluators used for matching costs, diagnostics and
tests; nothing here is differentiated.
"""

from __future__ import annotations

import warnings

import numpy as np

from .config import LossConfig, LossWeights
from .geometry import Box, pairwise_giou


class EmptyLossWarning(UserWarning):
    """Every pixel of a loss was ignored, so the loss is reported as 0."""


def _clamp(p, eps):
    return np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)


def focal_terms(pred, target, alpha=0.25, gamma=2.0, eps=1e-6) -> np.ndarray:
    """Elementwise binary focal loss on probabilities.

    Soft targets are supported by weighting the positive and negative branches
    with ``target`` and ``1 - target``; for hard targets this is the usual
    ``-alpha_t (1 - p_t)^gamma log p_t``.
    """
    p = _clamp(pred, eps)
    t = np.asarray(target, dtype=np.float64)
    pos = -alpha * t * (1.0 - p) ** gamma * np.log(p)
    neg = -(1.0 - alpha) * (1.0 - t) * p**gamma * np.log(1.0 - p)
    return pos + neg


def focal_loss(pred, target, ignore=None, alpha=0.25, gamma=2.0, eps=1e-6) -> float:
    """Mean focal loss over the pixels not covered by ``ignore``.

    ``pred`` and ``target`` may be :class:`ScalarMap` or arrays; ``ignore`` a
    :class:`BinaryMask`, a boolean array or ``None``.
    """
    pred = getattr(pred, "data", pred)
    target = getattr(target, "data", target)
    terms = focal_terms(pred, target, alpha, gamma, eps)
    if ignore is None:
        keep = np.ones(terms.shape, dtype=bool)
    else:
        ignore = ignore.to_dense() if hasattr(ignore, "to_dense") else np.asarray(ignore, bool)
        keep = ~ignore
    n = int(keep.sum())
    if n == 0:
        warnings.warn("focal loss over an empty pixel set", EmptyLossWarning, stacklevel=2)
        return 0.0
    return float(terms[keep].sum() / n)


def bce_loss(pred, target, eps=1e-6) -> float:
    p = _clamp(pred, eps)
    t = np.asarray(target, dtype=np.float64)
    return float(np.mean(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))))


def dice_loss(pred, target, smooth=1.0) -> float:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    return float(1.0 - (2.0 * np.dot(p, t) + smooth) / (p.sum() + t.sum() + smooth))


def mask_loss(pred_mask, gt, config: LossConfig = LossConfig()) -> float:
    """Sigmoid cross-entropy plus DICE between a probability grid and a GT mask."""
    gt = gt.to_dense() if hasattr(gt, "to_dense") else gt
    gt = np.asarray(gt, dtype=np.float64)
    pred_mask = np.asarray(pred_mask, dtype=np.float64)
    if pred_mask.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {gt.shape}")
    return bce_loss(pred_mask, gt, config.prob_clamp) + dice_loss(pred_mask, gt, config.dice_smooth)


def l1_box_loss(pred: Box, gt: Box) -> float:
    if pred.normalized != gt.normalized:
        raise ValueError("box units differ")
    return float(np.abs(pred.as_array() - gt.as_array()).sum())


def box_loss(pred: Box, gt: Box) -> float:
    """L1 over ``(cx, cy, w, h)`` plus ``1 - GIoU``."""
    giou = float(pairwise_giou(pred.as_array(), gt.as_array())[0, 0])
    return l1_box_loss(pred, gt) + (1.0 - giou)


def class_loss(class_probs, class_id, config: LossConfig = LossConfig()) -> float:
    """Sigmoid focal loss summed over classes against a one-hot target.

    ``class_id=None`` means the query is supervised as background (all zeros).
    """
    probs = np.asarray(class_probs, dtype=np.float64)
    target = np.zeros_like(probs)
    if class_id is not None:
        target[class_id] = 1.0
    return float(
        focal_terms(probs, target, config.focal_alpha, config.focal_gamma, config.prob_clamp).sum()
    )


def regression_l1(pred, target, valid) -> float:
    """Mean absolute error over the 4 regression channels at ``valid`` cells."""
    pred = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    target = np.asarray(getattr(target, "data", target), dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        return 0.0
    return float(np.abs(pred[valid] - target[valid]).sum() / valid.sum())


def ocp_level_loss(
    center_pred,
    regression_pred,
    objectness_pred,
    targets,
    weights: LossWeights = LossWeights(),
    config: LossConfig = LossConfig(),
) -> float:
    """Weighted objectness + regression + center loss for one pyramid level.

    ``targets`` is an :class:`~panoptic_ocp.targets.OcpTargets`. The center
    loss sees every cell; objectness and regression skip the ignore mask, and
    regression is only supervised where the objectness target is 1.
    """
    a, g, eps = config.focal_alpha, config.focal_gamma, config.prob_clamp
    ignore = targets.ignore.to_dense()
    l_obj = focal_loss(objectness_pred, targets.objectness, ignore, a, g, eps)
    valid = (targets.objectness.data > 0.5) & ~ignore
    l_reg = regression_l1(regression_pred, targets.regression, valid)
    l_center = focal_loss(center_pred, targets.center, None, a, g, eps)
    return weights.lambda_obj * l_obj + weights.lambda_reg * l_reg + weights.lambda_center * l_center


def pred_pair_loss(
    class_probs,
    pred_mask,
    pred_box: Box,
    gt_class: int,
    gt_mask,
    gt_box: Box,
    weights: LossWeights = LossWeights(),
    config: LossConfig = LossConfig(),
) -> float:
    return (
        weights.lambda_cls * class_loss(class_probs, gt_class, config)
        + weights.lambda_mask * mask_loss(pred_mask, gt_mask, config)
        + weights.lambda_box * box_loss(pred_box, gt_box)
    )


def prediction_loss(preds, gts, matches, image_w, image_h, weights=LossWeights(), config=LossConfig()):
    """Prediction loss of one decoder layer under a query/GT assignment.

    ``matches`` is an iterable of ``(query, gt)`` index pairs; a query may
    appear once, a GT several times. Unmatched queries contribute a background
    classification term. The sum is divided by the number of matches (min 1).
    """
    from .mask_decode import upsample_probs

    total = 0.0
    matched = set()
    n = 0
    for q, g in matches:
        pred, gt = preds[q], gts[g]
        gt_mask = gt.mask.to_dense()
        pm = upsample_probs(pred.mask, gt_mask.shape[0], gt_mask.shape[1], mode="nearest")
        total += pred_pair_loss(
            pred.class_probs,
            pm,
            pred.box,
            gt.class_id,
            gt_mask,
            gt.box.to_normalized(image_w, image_h),
            weights,
            config,
        )
        matched.add(q)
        n += 1
    for q, pred in enumerate(preds):
        if q not in matched:
            total += weights.lambda_cls * class_loss(pred.class_probs, None, config)
    return total / max(n, 1)


def total_loss(ocp_level_losses, layer_pred_losses) -> float:
    """Sum of per-level proposal losses and per-decoder-layer prediction losses."""
    return float(sum(ocp_level_losses) + sum(layer_pred_losses))
