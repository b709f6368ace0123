import math

import numpy as np
import pytest

from panoptic_ocp.config import LossWeights
from panoptic_ocp.geometry import Box, pairwise_giou
from panoptic_ocp.losses import (
    EmptyLossWarning,
    bce_loss,
    box_loss,
    class_loss,
    dice_loss,
    focal_loss,
    mask_loss,
    ocp_level_loss,
    pred_pair_loss,
    total_loss,
)
from panoptic_ocp.rasters import BinaryMask, RegressionMap, ScalarMap
from panoptic_ocp.targets import OcpTargets
from oracles import bce_scalar, focal_scalar

rng = np.random.default_rng(11)


def test_focal_vanishes_at_optimum():
    t = (rng.random((6, 6)) < 0.5).astype(float)
    prev = math.inf
    for eps in (1e-2, 1e-4, 1e-6):
        loss = focal_loss(np.clip(t, eps, 1 - eps), t)
        assert loss < prev
        prev = loss
    assert prev < 1e-9


def test_focal_gamma_zero_is_half_bce():
    p = rng.uniform(0.01, 0.99, (5, 5))
    t = (rng.random((5, 5)) < 0.5).astype(float)
    assert focal_loss(p, t, alpha=0.5, gamma=0.0) == pytest.approx(0.5 * bce_loss(p, t), rel=1e-12)


def test_focal_matches_scalar_oracle_with_ignore():
    p = rng.uniform(0.0, 1.0, (7, 9))
    t = rng.uniform(0.0, 1.0, (7, 9))
    ign = rng.random((7, 9)) < 0.3
    got = focal_loss(ScalarMap(4, p), ScalarMap(4, t), BinaryMask.from_dense(ign), 0.25, 2.0)
    terms = [focal_scalar(p[i, j], t[i, j], 0.25, 2.0) for i in range(7) for j in range(9) if not ign[i, j]]
    assert got == pytest.approx(sum(terms) / len(terms), abs=1e-6)


def test_focal_all_ignored_warns():
    with pytest.warns(EmptyLossWarning):
        assert focal_loss(np.full((2, 2), 0.3), np.zeros((2, 2)), np.ones((2, 2), bool)) == 0.0


def test_bce_dice_against_oracle():
    p = rng.uniform(0, 1, (8, 8))
    t = (rng.random((8, 8)) < 0.4).astype(float)
    want_bce = np.mean([bce_scalar(a, b) for a, b in zip(p.ravel(), t.ravel())])
    inter = sum(a * b for a, b in zip(p.ravel(), t.ravel()))
    want_dice = 1 - (2 * inter + 1) / (p.sum() + t.sum() + 1)
    assert bce_loss(p, t) == pytest.approx(want_bce, abs=1e-6)
    assert dice_loss(p, t) == pytest.approx(want_dice, abs=1e-6)
    assert mask_loss(p, BinaryMask.from_dense(t > 0.5)) == pytest.approx(want_bce + want_dice, abs=1e-6)


def test_dice_zero_for_identical_hard_masks():
    t = (rng.random((8, 8)) < 0.4).astype(float)
    assert dice_loss(t, t) == 0.0
    assert mask_loss(t, t > 0.5) < 1e-5


def test_box_loss_components():
    a, b = Box(0.5, 0.5, 0.2, 0.3, True), Box(0.55, 0.45, 0.25, 0.2, True)
    assert box_loss(a, a) == 0.0
    l1 = abs(0.05) + abs(0.05) + abs(0.05) + abs(0.1)
    g = pairwise_giou(a.as_array(), b.as_array())[0, 0]
    assert box_loss(a, b) == pytest.approx(l1 + 1 - g, abs=1e-12)


def test_class_loss_background_and_optimum():
    assert class_loss(np.array([1e-9, 1 - 1e-9, 1e-9]), 1) < 1e-5
    probs = np.array([0.2, 0.7])
    want = focal_scalar(0.2, 0, 0.25, 2) + focal_scalar(0.7, 0, 0.25, 2)
    assert class_loss(probs, None) == pytest.approx(want, abs=1e-12)


def test_pair_loss_recombines_with_published_weights():
    w = LossWeights()
    assert (w.lambda_cls, w.lambda_mask, w.lambda_box) == (4.0, 5.0, 5.0)
    assert (w.lambda_obj, w.lambda_reg, w.lambda_center) == (5.0, 5.0, 5.0)
    probs = rng.uniform(0, 1, 5)
    pm = rng.uniform(0, 1, (6, 6))
    gm = rng.random((6, 6)) < 0.5
    pb, gb = Box(0.4, 0.4, 0.2, 0.2, True), Box(0.45, 0.42, 0.18, 0.25, True)
    want = 4 * class_loss(probs, 2) + 5 * mask_loss(pm, gm) + 5 * box_loss(pb, gb)
    assert pred_pair_loss(probs, pm, pb, 2, gm, gb) == want


def test_ocp_level_loss_recombines():
    h, w = 5, 6
    tgt = OcpTargets(
        4,
        ScalarMap(4, rng.uniform(0, 1, (h, w))),
        RegressionMap(4, rng.standard_normal((h, w, 4))),
        ScalarMap(4, (rng.random((h, w)) < 0.5).astype(float)),
        BinaryMask.from_dense(rng.random((h, w)) < 0.2),
    )
    c, o = rng.uniform(0, 1, (h, w)), rng.uniform(0, 1, (h, w))
    r = rng.standard_normal((h, w, 4))
    ign = tgt.ignore.to_dense()
    valid = (tgt.objectness.data > 0.5) & ~ign
    l_reg = np.abs(r[valid] - tgt.regression.data[valid]).sum() / valid.sum()
    want = 5 * focal_loss(o, tgt.objectness, ign) + 5 * l_reg + 5 * focal_loss(c, tgt.center)
    assert ocp_level_loss(c, r, o, tgt) == pytest.approx(want, rel=1e-12)
    assert total_loss([1.0, 2.0], [3.0]) == 6.0


def test_losses_nonnegative():
    for _ in range(20):
        p = rng.uniform(0, 1, (4, 4))
        t = rng.uniform(0, 1, (4, 4))
        assert focal_loss(p, t) >= 0
        assert bce_loss(p, t) >= 0
        assert dice_loss(p, t) >= 0
