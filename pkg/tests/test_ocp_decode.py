import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from panoptic_ocp.config import DecodeConfig
from panoptic_ocp.ocp_decode import (
    DegenerateQueryWarning,
    LevelHeads,
    Peak,
    content_query,
    decode_all,
    heatmap_nms,
    instance_voting,
    positional_query,
    rank_and_select,
)
from panoptic_ocp.rasters import LEVEL_STRIDES, BinaryMask, FeatureMap, RegressionMap, ScalarMap
from panoptic_ocp.synthetic import gaussian_peaks, planted_heads, random_planted_objects
from panoptic_ocp.targets import level_shape
from oracles import nearest_vote, pooled_sum, window_scan_peaks


def test_single_gaussian_single_peak():
    c = ScalarMap(4, gaussian_peaks([(7, 9)], 16, 20))
    peaks = heatmap_nms(c)
    assert [(p.row, p.col) for p in peaks] == [(7, 9)]
    assert peaks[0].prob == 1.0


def test_uniform_map_has_no_peaks():
    assert heatmap_nms(ScalarMap(4, np.full((8, 8), 0.7))) == []


def test_probability_floor():
    c = ScalarMap(4, 0.04 * gaussian_peaks([(3, 3)], 8, 8))
    assert heatmap_nms(c) == []
    assert len(heatmap_nms(c, prob_floor=0.0)) == 1


def test_five_gaussians_against_window_scan():
    rng = np.random.default_rng(5)
    centers = [(3, 3), (3, 12), (10, 6), (14, 16), (8, 18)]
    data = gaussian_peaks(centers, 18, 22) * rng.uniform(0.5, 1.0)
    data = data * 0.9 + 0.01 * rng.random(data.shape)
    got = heatmap_nms(ScalarMap(8, data), 3, 0.05)
    want = window_scan_peaks(data, 3, 0.05)
    assert sorted((p.row, p.col) for p in got) == sorted(want)
    assert sorted((p.row, p.col) for p in got) == sorted(centers)


@given(st.integers(0, 10_000), st.sampled_from([1, 3, 5]))
def test_nms_matches_scan_on_noise(seed, window):
    data = np.random.default_rng(seed).random((9, 11)).round(2)  # rounding creates plateaus
    got = heatmap_nms(ScalarMap(4, data), window, 0.05)
    assert sorted((p.row, p.col) for p in got) == sorted(window_scan_peaks(data, window, 0.05))
    probs = [p.prob for p in got]
    assert probs == sorted(probs, reverse=True)


def test_rank_merges_levels_and_truncates():
    a = [Peak(4, 0, 0, 0.9), Peak(4, 1, 1, 0.5), Peak(4, 2, 2, 0.1)]
    b = [Peak(8, 0, 0, 0.7), Peak(8, 1, 1, 0.3)]
    merged = rank_and_select([a, b], 10)
    assert [p.prob for p in merged] == sorted([p.prob for p in a + b], reverse=True)
    assert rank_and_select([a, b], 2) == merged[:2]


def test_rank_tie_prefers_finer_stride():
    merged = rank_and_select([[Peak(16, 0, 0, 0.5)], [Peak(4, 3, 3, 0.5)]], 5)
    assert [p.stride for p in merged] == [4, 16]


def test_rank_prefix_stability():
    rng = np.random.default_rng(2)
    peaks = [Peak(s, int(r), int(c), float(p)) for s, r, c, p in
             zip(rng.choice(LEVEL_STRIDES, 40), rng.integers(0, 9, 40), rng.integers(0, 9, 40), rng.random(40))]
    full = rank_and_select([peaks], 100)
    fewer = rank_and_select([[p for p in peaks if p is not full[-1]]], 100)
    assert fewer == full[:-1]


def test_positional_query_centered():
    reg = np.zeros((4, 4, 4))
    reg[1, 2] = [0.0, 0.0, 2.0, 3.0]
    box, clamped = positional_query(RegressionMap(8, reg), 1, 2, 32, 32)
    assert not clamped
    assert np.allclose(box.as_array(), [20 / 32, 12 / 32, 16 / 32, 24 / 32])


def test_positional_query_clamps_negative_size():
    reg = np.zeros((2, 2, 4))
    reg[0, 0] = [0.1, 0.2, -1.0, 2.0]
    box, clamped = positional_query(RegressionMap(4, reg), 0, 0, 8, 8)
    assert clamped and box.w == 0.0 and box.h == 1.0


def test_voting_assigns_coinciding_center():
    reg = np.zeros((6, 6, 4))
    reg[4, 4, :2] = [-2.0, -3.0]  # regresses onto cell (1, 2)
    masks = instance_voting(RegressionMap(4, reg), [(1, 2)], theta=0.5)
    d = masks[0].to_dense()
    assert d[4, 4] and d[1, 2]
    assert d.sum() == 2


def test_voting_respects_threshold():
    reg = np.zeros((6, 6, 4))
    reg[4, 4, :2] = [-2.0, -2.5]  # lands 0.5 cells from (1, 2)
    masks = instance_voting(RegressionMap(4, reg), [(1, 2)], theta=0.5)
    assert not masks[0].to_dense()[4, 4]


def test_voting_matches_nearest_oracle():
    rng = np.random.default_rng(9)
    reg = rng.normal(0, 2.0, (12, 14, 4))
    cells = [(2, 3), (6, 10), (9, 4)]
    masks = instance_voting(RegressionMap(4, reg), cells, theta=2.5)
    want = nearest_vote(reg, cells, 2.5)
    for k, m in enumerate(masks):
        assert np.array_equal(m.to_dense(), want == k)
    stacked = np.stack([m.to_dense() for m in masks])
    assert stacked.sum(0).max() <= 1


def test_content_query_single_cell():
    feats = np.random.default_rng(0).standard_normal((4, 5, 6))
    mask = np.zeros((4, 5), bool)
    mask[2, 3] = True
    q = content_query(FeatureMap(4, feats), ScalarMap(4, np.ones((4, 5))), BinaryMask.from_dense(mask))
    assert np.array_equal(q, feats[2, 3])


def test_content_query_uniform_features_scale():
    feats = np.tile(np.arange(3.0), (4, 4, 1))
    obj = np.random.default_rng(1).random((4, 4))
    mask = np.random.default_rng(2).random((4, 4)) < 0.5
    q = content_query(FeatureMap(4, feats), ScalarMap(4, obj), mask)
    assert np.allclose(q, np.arange(3.0) * (obj * mask).sum())
    qn = content_query(FeatureMap(4, feats), ScalarMap(4, obj), mask, normalize=True)
    assert np.allclose(qn, np.arange(3.0))


def test_content_query_random_against_loops():
    rng = np.random.default_rng(4)
    feats, obj, mask = rng.standard_normal((6, 7, 5)), rng.random((6, 7)), rng.random((6, 7)) < 0.4
    q = content_query(FeatureMap(8, feats), ScalarMap(8, obj), mask)
    assert np.allclose(q, pooled_sum(feats, obj, mask), atol=1e-5)


def test_content_query_empty_warns():
    with pytest.warns(DegenerateQueryWarning):
        q = content_query(FeatureMap(4, np.ones((2, 2, 3))), ScalarMap(4, np.ones((2, 2))), np.zeros((2, 2), bool))
    assert not q.any()


def _empty_heads(w=256, h=256, c=4):
    heads = {}
    for s in LEVEL_STRIDES:
        mh, mw = level_shape(h, w, s)
        heads[s] = LevelHeads(
            ScalarMap(s, np.zeros((mh, mw))),
            RegressionMap(s, np.zeros((mh, mw, 4))),
            ScalarMap(s, np.zeros((mh, mw))),
            FeatureMap(s, np.zeros((mh, mw, c))),
        )
    return heads


def test_decode_empty_heads_passes_stuff_through():
    stuff = np.random.default_rng(0).standard_normal((50, 4))
    qs = decode_all(_empty_heads(), stuff)
    assert qs.things == []
    assert np.array_equal(qs.stuff, stuff)


def test_decode_missing_level():
    heads = _empty_heads()
    del heads[32]
    with pytest.raises(KeyError):
        decode_all(heads)


def test_decode_caps_at_250():
    heads = _empty_heads(512, 512)
    cells = [(r, c) for r in range(0, 128, 2) for c in range(0, 10, 2)][:300]
    data = np.zeros((128, 128))
    rng = np.random.default_rng(0)
    for r, c in cells:
        data[r, c] = rng.uniform(0.2, 1.0)
    heads[4] = LevelHeads(ScalarMap(4, data), heads[4].regression, heads[4].objectness, heads[4].features)
    assert len(heatmap_nms(heads[4].center)) == 300
    qs = decode_all(heads)
    assert len(qs.things) == 250
    assert all(p.empty_support for p in qs.things)  # objectness is zero everywhere
    assert DecodeConfig().n_thing == 250 and DecodeConfig().n_stuff == 50


@pytest.mark.parametrize("k", [1, 4, 10])
def test_plant_and_recover(k):
    rng = np.random.default_rng(100 + k)
    objs = random_planted_objects(k, 512, 384, rng)
    heads = planted_heads(objs, 512, 384)
    qs = decode_all(heads, image_size=(512, 384))
    assert len(qs.things) == k
    got = {(p.stride, p.row, p.col): p for p in qs.things}
    for o in objs:
        p = got[(o.stride, o.row, o.col)]
        want = o.box_px().to_normalized(512, 384)
        assert np.allclose(p.box.as_array(), want.as_array(), atol=1e-12)
        theta = 0.02 * heads[o.stride].regression.width
        assert p.approx_mask.to_dense()[o.row, o.col] == (np.hypot(o.dx, o.dy) <= theta)


def test_decode_is_deterministic():
    rng = np.random.default_rng(8)
    heads = planted_heads(random_planted_objects(6, 256, 256, rng), 256, 256)
    a, b = decode_all(heads), decode_all(heads)
    for p, q in zip(a.things, b.things):
        assert p.box == q.box and np.array_equal(p.content, q.content) and p.approx_mask == q.approx_mask
