"""On-disk fixture bundles shared by the CLI and acceptance tests."""

from pathlib import Path

import numpy as np

from panoptic_ocp import io
from panoptic_ocp.geometry import mask_to_box
from panoptic_ocp.mask_decode import InstancePrediction
from panoptic_ocp.synthetic import (
    DRIFT_IMAGE,
    drift_scene,
    perturb_panoptic_map,
    planted_heads,
    random_panoptic_map,
    random_planted_objects,
)


def write_drift(root: Path):
    """Drift scene as a prediction bundle plus a GT bundle (masks at image resolution)."""
    preds, gts = drift_scene()
    w, h = DRIFT_IMAGE
    full = [InstancePrediction(p.class_probs, p.box, np.zeros((h, w)), p.is_thing) for p in preds]
    io.write_prediction_bundle(root / "pred" / "drift", "drift", (h, w), full)
    io.write_panoptic_bundle(root / "gt" / "drift", io.instances_to_panoptic(h, w, gts), "drift")
    return root / "pred", root / "gt"


def write_panoptic_set(root: Path, n: int = 6, seed: int = 0, size: int = 48):
    """``n`` random GT maps and noisy predictions of them, as two bundle collections."""
    rng = np.random.default_rng(seed)
    for k in range(n):
        gt = random_panoptic_map(rng, size, size, int(rng.integers(2, 7)))
        pred = perturb_panoptic_map(gt, rng, flip_frac=0.05)
        io.write_panoptic_bundle(root / "gt" / f"img{k:02d}", gt, f"img{k:02d}")
        io.write_panoptic_bundle(root / "pred" / f"img{k:02d}", pred, f"img{k:02d}")
    return root / "pred", root / "gt"


def write_prediction_set(root: Path, n: int = 4, seed: int = 0, size: int = 48, n_cls: int = 4):
    """Per image: the GT map plus thing/stuff predictions made from its segments with noise."""
    rng = np.random.default_rng(seed)
    for k in range(n):
        gt = random_panoptic_map(rng, size, size, int(rng.integers(2, 7)), void_frac=0.0)
        preds = []
        for sid, seg in sorted(gt.segments.items()):
            m = gt.ids == sid
            noisy = m & (rng.random(m.shape) > 0.05)
            if not noisy.any():
                continue
            probs = rng.uniform(0.0, 0.2, n_cls)
            probs[seg.class_id] = rng.uniform(0.4, 1.0)
            box = mask_to_box(noisy).to_normalized(size, size)
            preds.append(InstancePrediction(probs, box, noisy.astype(float), seg.is_thing))
        name = f"img{k:02d}"
        io.write_prediction_bundle(root / "pred" / name, name, (size, size), preds)
        io.write_panoptic_bundle(root / "gt" / name, gt, name)
    return root / "pred", root / "gt"


def write_planted(root: Path, ks=(3, 7), image=(256, 192), seed=0):
    """Planted-head bundles; returns ``{image_id: objects}``."""
    rng = np.random.default_rng(seed)
    out = {}
    for k in ks:
        objs = random_planted_objects(k, image[0], image[1], rng)
        name = f"planted{k:02d}"
        io.write_heads_bundle(root / name, name, image, planted_heads(objs, image[0], image[1], seed=k))
        out[name] = objs
    return out


def tree_bytes(root: Path) -> dict:
    """Relative path -> file bytes for every file under ``root``."""
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
