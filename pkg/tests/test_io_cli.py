import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from panoptic_ocp import io
from panoptic_ocp.cli import main
from panoptic_ocp.rasters import BinaryMask
from panoptic_ocp.synthetic import random_panoptic_map
from bundles import tree_bytes, write_drift, write_panoptic_set, write_planted, write_prediction_set


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    err = capsys.readouterr().err
    return code, (json.loads(err.strip().splitlines()[-1]) if err.strip() else None)


# --- formats ------------------------------------------------------------


def test_tensor_round_trip(tmp_path):
    arr = np.random.default_rng(0).standard_normal((5, 7, 3)).astype(np.float32)
    io.write_tensor(tmp_path / "t.bin", arr, stride=16)
    raw = (tmp_path / "t.bin").read_bytes()
    assert raw.startswith(b"v1 5 7 3 16\n")
    assert len(raw) == len(b"v1 5 7 3 16\n") + arr.size * 4
    back, stride = io.read_tensor(tmp_path / "t.bin")
    assert stride == 16 and np.array_equal(back, arr)


def test_tensor_little_endian_payload(tmp_path):
    io.write_tensor(tmp_path / "t.bin", np.array([[[1.0]]]), 4)
    assert (tmp_path / "t.bin").read_bytes().endswith(np.array([1.0], dtype="<f4").tobytes())


@pytest.mark.parametrize(
    "payload, error",
    [(b"v2 1 1 1 4\n\x00\x00\x00\x00", io.MalformedManifestError),
     (b"v1 2 2 1 4\n\x00\x00\x00\x00", io.ShapeMismatchError),
     (b"garbage", io.MalformedManifestError)],
)
def test_tensor_errors(tmp_path, payload, error):
    (tmp_path / "t.bin").write_bytes(payload)
    with pytest.raises(error):
        io.read_tensor(tmp_path / "t.bin")
    with pytest.raises(io.MissingFileError):
        io.read_tensor(tmp_path / "absent.bin")


@given(st.integers(0, 2**32 - 1))
def test_panoptic_json_round_trip(seed):
    pmap = random_panoptic_map(np.random.default_rng(seed), 17, 23, 5)
    assert io.panoptic_from_json(json.loads(io.dumps_json(io.panoptic_to_json(pmap, "x")))) == pmap


def test_mask_json_shape_checked():
    rec = io.mask_to_json(BinaryMask.from_dense(np.eye(4, dtype=bool)))
    assert rec == {"size": [4, 4], "counts": [0, 1, 5, 1, 10, 1, 15, 1]}
    with pytest.raises(io.ShapeMismatchError):
        io.mask_from_json(rec, (5, 4))
    with pytest.raises(io.MalformedManifestError):
        io.mask_from_json({"size": [4, 4], "counts": [0, 20]})


def test_heads_bundle_round_trip(tmp_path):
    planted = write_planted(tmp_path, ks=(2,))
    image_id, size, heads, stuff = io.read_heads_bundle(tmp_path / "planted02")
    assert image_id == "planted02" and size == (256, 192) and stuff is None
    assert sorted(heads) == [4, 8, 16, 32, 64]
    assert heads[4].center.data.shape == (48, 64)
    assert len(planted["planted02"]) == 2


def test_prediction_bundle_round_trip(tmp_path):
    pred_root, _ = write_prediction_set(tmp_path, n=1)
    bundle = io.bundle_paths(pred_root)[0]
    image_id, size, preds = io.read_prediction_bundle(bundle)
    io.write_prediction_bundle(tmp_path / "again", image_id, size, preds)
    assert io.read_manifest(tmp_path / "again") == io.read_manifest(bundle)


# --- CLI ----------------------------------------------------------------


def test_eval_identical_is_perfect(tmp_path, capsys):
    _, gt = write_panoptic_set(tmp_path)
    code, _ = run(capsys, "eval", "--pred", gt, "--gt", gt, "--output", tmp_path / "rep")
    assert code == 0
    rep = json.loads((tmp_path / "rep" / "report.json").read_text())
    for name in ("All", "Th", "St"):
        assert rep["groups"][name]["pq"] == 1.0
    assert all(c["pq"] == 1.0 for c in rep["per_class"].values())
    assert "Th_a" in (tmp_path / "rep" / "report.txt").read_text()


def test_eval_with_class_table(tmp_path, capsys):
    pred, gt = write_panoptic_set(tmp_path)
    (tmp_path / "classes.json").write_text(json.dumps({"classes": [{"id": c, "is_thing": c == 3} for c in range(4)]}))
    code, _ = run(capsys, "eval", "--pred", pred, "--gt", gt, "--classes", tmp_path / "classes.json",
                  "--output", tmp_path / "rep")
    assert code == 0
    rep = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert {k for k, v in rep["per_class"].items() if v["is_thing"]} <= {"3"}


def test_decode_planted_fixture(tmp_path, capsys):
    planted = write_planted(tmp_path / "heads")
    code, _ = run(capsys, "decode", tmp_path / "heads", "--output", tmp_path / "out")
    assert code == 0
    for name, objs in planted.items():
        m = io.read_manifest(tmp_path / "out" / name)
        assert len(m["proposals"]) == len(objs)
        got = {(p["level"], p["row"], p["col"]): p["box"] for p in m["proposals"]}
        for o in objs:
            want = o.box_px().to_normalized(256, 192).as_array()
            assert np.allclose(got[(o.stride, o.row, o.col)], want, atol=1e-6)  # float32 storage
        content, _ = io.read_tensor(tmp_path / "out" / name / "content_queries.bin")
        assert content.shape == (len(objs), 8, 1)


def test_match_refine_vs_no_refine(tmp_path, capsys):
    pred, gt = write_drift(tmp_path)
    assert run(capsys, "match", "--pred", pred, "--gt", gt, "--output", tmp_path / "r")[0] == 0
    assert run(capsys, "match", "--pred", pred, "--gt", gt, "--no-refine", "--output", tmp_path / "n")[0] == 0
    refined = io.read_manifest(tmp_path / "r" / "drift")["things"]
    plain = io.read_manifest(tmp_path / "n" / "drift")["things"]
    assert [(m["query"], m["gt"], m["stage"]) for m in plain["matches"]] == [(0, 0, "base"), (2, 1, "base")]
    assert [(m["query"], m["gt"], m["stage"]) for m in refined["matches"]] == [(0, 0, "base"), (1, 0, "added-stage2")]
    assert [(m["query"], m["gt"], m["stage"]) for m in refined["removed"]] == [(2, 1, "removed-stage1")]


def test_fuse_and_detect_rate(tmp_path, capsys):
    pred, gt = write_prediction_set(tmp_path)
    assert run(capsys, "fuse", pred, "--output", tmp_path / "fused")[0] == 0
    assert run(capsys, "eval", "--pred", tmp_path / "fused", "--gt", gt, "--output", tmp_path / "rep")[0] == 0
    rep = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert rep["groups"]["All"]["pq"] > 0.5
    assert run(capsys, "detect-rate", "--pred", tmp_path / "fused", "--gt", gt, "--output", tmp_path / "dr")[0] == 0
    bins = json.loads((tmp_path / "dr" / "detection_rate.json").read_text())["bins"]
    assert [b["lo"] for b in bins] == [0, 32, 64, 128, 256, 512]
    assert bins[-1]["hi"] is None


def test_gen_targets(tmp_path, capsys):
    _, gt = write_panoptic_set(tmp_path, n=2)
    assert run(capsys, "gen-targets", gt, "--output", tmp_path / "t")[0] == 0
    m = io.read_manifest(tmp_path / "t" / "img00")
    assert sorted(m["levels"], key=int) == ["4", "8", "16", "32", "64"]
    center, stride = io.read_tensor(tmp_path / "t" / "img00" / m["levels"]["4"]["center"])
    assert stride == 4 and center.shape == (12, 12, 1)


def test_augment_requires_seed(tmp_path, capsys):
    _, gt = write_panoptic_set(tmp_path, n=2)
    with pytest.raises(SystemExit) as exc:
        main(["augment", str(gt), "--donors", str(gt), "--output", str(tmp_path / "a")])
    assert exc.value.code == 2
    assert json.loads(capsys.readouterr().err.strip())["error"] == "usage"
    code, _ = run(capsys, "augment", gt, "--donors", gt, "--seed", 3, "--n", 2, "--output", tmp_path / "a")
    assert code == 0
    assert len(io.bundle_paths(tmp_path / "a")) == 2


def test_error_codes(tmp_path, capsys):
    code, err = run(capsys, "eval", "--pred", tmp_path / "nope", "--gt", tmp_path / "nope", "--output", tmp_path / "o")
    assert code == 5 and err["code"] == 5

    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "manifest.json").write_text('{"format_version": 1, "height": 4}')
    code, err = run(capsys, "fuse", bad, "--output", tmp_path / "o")
    assert code == 3 and err["error"] == "malformed_manifest"

    (bad / "manifest.json").write_text("{not json")
    assert run(capsys, "fuse", bad, "--output", tmp_path / "o")[0] == 3

    pred, gt = write_panoptic_set(tmp_path / "a", n=1, size=16)
    _, gt2 = write_panoptic_set(tmp_path / "b", n=1, size=20)
    code, err = run(capsys, "eval", "--pred", pred, "--gt", gt2, "--output", tmp_path / "o")
    assert code == 4

    assert run(capsys, "eval", "--pred", pred, "--gt", gt, "--jobs", 0, "--output", tmp_path / "o")[0] == 2


def test_config_override(tmp_path, capsys):
    pred, gt = write_drift(tmp_path)
    (tmp_path / "cfg.yaml").write_text("match:\n  theta_fn: 0.95\n")
    assert run(capsys, "match", "--pred", pred, "--gt", gt, "--config", tmp_path / "cfg.yaml",
               "--output", tmp_path / "r")[0] == 0
    things = io.read_manifest(tmp_path / "r" / "drift")["things"]
    assert [m["stage"] for m in things["matches"]] == ["base"]  # 0.86 no longer exceeds theta_fn
    (tmp_path / "bad.yaml").write_text("match:\n  no_such_key: 1\n")
    assert run(capsys, "match", "--pred", pred, "--gt", gt, "--config", tmp_path / "bad.yaml",
               "--output", tmp_path / "r")[0] == 2


def test_outputs_identical_across_jobs(tmp_path, capsys):
    pred, gt = write_prediction_set(tmp_path / "in", n=5)
    outs = {}
    for jobs in (1, 8):
        d = tmp_path / f"j{jobs}"
        assert run(capsys, "fuse", pred, "--jobs", jobs, "--output", d / "fused")[0] == 0
        assert run(capsys, "match", "--pred", pred, "--gt", gt, "--jobs", jobs, "--output", d / "match")[0] == 0
        assert run(capsys, "augment", gt, "--donors", gt, "--seed", 7, "--jobs", jobs, "--output", d / "aug")[0] == 0
        outs[jobs] = tree_bytes(d)
    assert outs[1] == outs[8]
