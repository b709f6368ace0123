"""Write a small synthetic dataset in the bundle formats the CLI reads.

Layout under OUT:
    heads/<id>/      planted head tensors (decode input)
    gt/<id>/         ground-truth panoptic maps
    pred/<id>/       noisy thing/stuff predictions of those maps (match/fuse input)
"""

import argparse
from pathlib import Path

import numpy as np

from panoptic_ocp import io
from panoptic_ocp.geometry import mask_to_box
from panoptic_ocp.mask_decode import InstancePrediction
from panoptic_ocp.synthetic import planted_heads, random_panoptic_map, random_planted_objects


def noisy_predictions(gt, rng, n_classes, drop=0.05):
    h, w = gt.ids.shape
    preds = []
    for sid, seg in sorted(gt.segments.items()):
        mask = (gt.ids == sid) & (rng.random((h, w)) > drop)
        if not mask.any():
            continue
        probs = rng.uniform(0.0, 0.2, n_classes)
        probs[seg.class_id] = rng.uniform(0.4, 1.0)
        box = mask_to_box(mask).to_normalized(w, h)
        preds.append(InstancePrediction(probs, box, mask.astype(float), seg.is_thing))
    return preds


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path)
    ap.add_argument("--images", type=int, default=8)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--classes", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    for k in range(args.images):
        name = f"img{k:03d}"
        objs = random_planted_objects(int(rng.integers(1, 11)), 4 * args.size, 4 * args.size, rng)
        io.write_heads_bundle(args.out / "heads" / name, name, (4 * args.size, 4 * args.size),
                              planted_heads(objs, 4 * args.size, 4 * args.size, seed=k))
        gt = random_panoptic_map(rng, args.size, args.size, int(rng.integers(2, 9)), args.classes, void_frac=0.0)
        io.write_panoptic_bundle(args.out / "gt" / name, gt, name)
        io.write_prediction_bundle(args.out / "pred" / name, name, (args.size, args.size),
                                   noisy_predictions(gt, rng, args.classes))
    print(f"wrote {args.images} images under {args.out}")


if __name__ == "__main__":
    main()
