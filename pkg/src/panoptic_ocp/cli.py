"""Command-line entry point.

Every command reads one bundle or a directory of bundles, runs one pipeline
stage per image (optionally in a process pool), and writes one output bundle
per image under ``--output``. Failures exit nonzero and print a one-line JSON
error record on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .augment import copy_paste
from .config import Config, load_config
from .fusion import fuse
from .io import BundleError, MalformedManifestError, ShapeMismatchError
from .matching import match_stuff, match_things, test_time_nms
from .metrics import aggregate, class_agnostic, detection_rate_by_size, pq_evaluate
from .ocp_decode import decode_all
from .rasters import BinaryMask
from .targets import build_ocp_targets

EXIT_USAGE = 2


class UsageError(Exception):
    code = EXIT_USAGE
    kind = "usage"


def _emit_error(kind: str, code: int, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "code": code, "message": message}, sort_keys=True) + "\n")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("usage", EXIT_USAGE, message)
        sys.exit(EXIT_USAGE)


def _pool_map(fn, items, jobs: int):
    """Ordered map over ``items``; results do not depend on ``jobs``."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _image_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# --- per-image workers (module level so they pickle) --------------------


def _gen_targets_one(args):
    bundle, out_root, cfg = args
    image_id, pmap = io.read_gt_bundle(bundle)
    instances = io.gt_instances(pmap)
    targets = build_ocp_targets(instances, pmap.height, pmap.width, cfg.targets)
    out = Path(out_root) / image_id
    levels = {}
    for stride, t in sorted(targets.items()):
        files = {}
        for key, arr in (("center", t.center.data), ("regression", t.regression.data), ("objectness", t.objectness.data)):
            name = f"{key}_s{stride}.bin"
            io.write_tensor(out / name, arr, stride)
            files[key] = name
        files["ignore"] = io.mask_to_json(t.ignore)
        levels[str(stride)] = files
    io.write_json(
        out / io.MANIFEST,
        {"format_version": io.FORMAT_VERSION, "image_id": image_id, "height": pmap.height, "width": pmap.width, "levels": levels},
    )
    return image_id


def _decode_one(args):
    bundle, out_root, cfg = args
    image_id, image_size, heads, stuff = io.read_heads_bundle(bundle)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            qs = decode_all(heads, stuff, cfg.decode, image_size)
    except KeyError as exc:
        raise MalformedManifestError(str(exc)) from exc
    out = Path(out_root) / image_id
    proposals = []
    for p in qs.things:
        proposals.append(
            {
                "level": p.stride,
                "row": p.row,
                "col": p.col,
                "score": p.prob,
                "box": [float(v) for v in p.box.as_array()],
                "size_clamped": p.size_clamped,
                "empty_support": p.empty_support,
                "approx_mask": io.mask_to_json(p.approx_mask),
            }
        )
    channels = heads[min(heads)].features.channels
    content = np.stack([p.content for p in qs.things]) if qs.things else np.zeros((0, channels))
    io.write_tensor(out / "content_queries.bin", content[:, :, None])
    io.write_json(
        out / io.MANIFEST,
        {
            "format_version": io.FORMAT_VERSION,
            "image_id": image_id,
            "width": image_size[0],
            "height": image_size[1],
            "n_stuff": int(qs.stuff.shape[0]),
            "proposals": proposals,
            "content_queries": "content_queries.bin",
        },
    )
    return image_id


def _match_one(args):
    pred_bundle, gt_bundle, out_root, cfg, refine = args
    image_id, size, preds = io.read_prediction_bundle(pred_bundle)
    _, pmap = io.read_gt_bundle(gt_bundle)
    if (pmap.height, pmap.width) != tuple(size):
        raise ShapeMismatchError(f"{image_id}: prediction size {size} != GT size {(pmap.height, pmap.width)}")
    gts = io.gt_instances(pmap)
    h, w = size
    thing_q = [i for i, p in enumerate(preds) if p.is_thing]
    stuff_q = [i for i, p in enumerate(preds) if not p.is_thing]
    thing_g = [i for i, g in enumerate(gts) if g.is_thing]
    stuff_g = [i for i, g in enumerate(gts) if not g.is_thing]

    things = match_things([preds[i] for i in thing_q], [gts[i] for i in thing_g], w, h,
                          cfg.match, cfg.weights, cfg.loss, refine=refine)
    stuff = match_stuff([preds[i] for i in stuff_q], [gts[i] for i in stuff_g], w, h, cfg.weights, cfg.loss)

    def remap(ms, qidx, gidx):
        d = ms.to_dict()
        for rec in d["matches"] + d["removed"]:
            rec["query"], rec["gt"] = qidx[rec["query"]], gidx[rec["gt"]]
        d["unmatched_queries"] = [qidx[q] for q in d["unmatched_queries"]]
        d["unmatched_gts"] = [gidx[g] for g in d["unmatched_gts"]]
        return d

    io.write_json(
        Path(out_root) / image_id / io.MANIFEST,
        {
            "format_version": io.FORMAT_VERSION,
            "image_id": image_id,
            "refined": refine,
            "things": remap(things, thing_q, thing_g),
            "stuff": remap(stuff, stuff_q, stuff_g),
        },
    )
    return image_id


def _fuse_one(args):
    bundle, out_root, cfg, nms = args
    image_id, size, preds = io.read_prediction_bundle(bundle)
    things = [p for p in preds if p.is_thing]
    stuffs = [p for p in preds if not p.is_thing]
    if nms:
        things = [things[i] for i in test_time_nms(things, cfg.match.nms_iou)]
    pmap = fuse(things, stuffs, cfg.fusion, size=size)
    io.write_panoptic_bundle(Path(out_root) / image_id, pmap, image_id)
    return image_id


def _eval_one(args):
    pred_bundle, gt_bundle, cfg = args
    _, pred = io.read_gt_bundle(pred_bundle)
    image_id, gt = io.read_gt_bundle(gt_bundle)
    if pred.ids.shape != gt.ids.shape:
        raise ShapeMismatchError(f"{image_id}: prediction {pred.ids.shape} != ground truth {gt.ids.shape}")
    iou = cfg.metrics.match_iou
    return pq_evaluate(pred, gt, iou), class_agnostic(pred, gt, iou)


def _rate_one(args):
    pred_bundle, gt_bundle, cfg = args
    _, pred = io.read_gt_bundle(pred_bundle)
    _, gt = io.read_gt_bundle(gt_bundle)
    return detection_rate_by_size([(pred, gt)], cfg.metrics.size_bins, cfg.metrics.match_iou)


def _augment_one(args):
    bundle, out_root, cfg, donors, n, seed, region_classes = args
    image_id, pmap = io.read_gt_bundle(bundle)
    instances = io.gt_instances(pmap)
    region = None
    if region_classes:
        dense = np.isin(pmap.ids, [sid for sid, s in pmap.segments.items() if s.class_id in region_classes])
        if dense.any():
            region = BinaryMask.from_dense(dense)
    if region_classes and region is None:
        out = instances  # nothing to paste into
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out = copy_paste(instances, pmap.height, pmap.width, donors, region, n, seed, cfg.augment.max_retries)
    io.write_panoptic_bundle(Path(out_root) / image_id, io.instances_to_panoptic(pmap.height, pmap.width, out), image_id)
    return image_id


# --- commands -----------------------------------------------------------


def _pair_bundles(pred_root, gt_root):
    preds = {p.name: p for p in io.bundle_paths(pred_root)}
    gts = {p.name: p for p in io.bundle_paths(gt_root)}
    if len(preds) == 1 and len(gts) == 1:
        return [(next(iter(preds.values())), next(iter(gts.values())))]
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise io.MissingFileError(f"no prediction bundle for {missing}")
    return [(preds[k], gts[k]) for k in sorted(gts)]


def cmd_gen_targets(a, cfg):
    items = [(b, a.output, cfg) for b in io.bundle_paths(a.input)]
    return _pool_map(_gen_targets_one, items, a.jobs)


def cmd_decode(a, cfg):
    items = [(b, a.output, cfg) for b in io.bundle_paths(a.input)]
    return _pool_map(_decode_one, items, a.jobs)


def cmd_match(a, cfg):
    items = [(p, g, a.output, cfg, a.refine) for p, g in _pair_bundles(a.pred, a.gt)]
    return _pool_map(_match_one, items, a.jobs)


def cmd_fuse(a, cfg):
    items = [(b, a.output, cfg, a.nms) for b in io.bundle_paths(a.input)]
    return _pool_map(_fuse_one, items, a.jobs)


def _read_class_table(path):
    if path is None:
        return None
    data = io.read_json(path)
    try:
        return {int(c["id"]): bool(c["is_thing"]) for c in data["classes"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedManifestError(f"bad class table {path}: {exc}") from exc


def cmd_eval(a, cfg):
    table = _read_class_table(a.classes)
    items = [(p, g, cfg) for p, g in _pair_bundles(a.pred, a.gt)]
    results = _pool_map(_eval_one, items, a.jobs)
    report = aggregate([r[0] for r in results], table, [r[1] for r in results])
    out = Path(a.output)
    doc = report.to_dict()
    doc["format_version"] = io.FORMAT_VERSION
    doc["n_images"] = len(results)
    io.write_json(out / "report.json", doc)
    io.atomic_write_bytes(out / "report.txt", report.table().encode())
    return doc


def cmd_detect_rate(a, cfg):
    items = [(p, g, cfg) for p, g in _pair_bundles(a.pred, a.gt)]
    per_image = _pool_map(_rate_one, items, a.jobs)
    bins = per_image[0] if per_image else []
    for other in per_image[1:]:
        for b, o in zip(bins, other):
            b.detected += o.detected
            b.total += o.total
    doc = {"format_version": io.FORMAT_VERSION, "bins": [b.to_dict() for b in bins]}
    io.write_json(Path(a.output) / "detection_rate.json", doc)
    return doc


def cmd_augment(a, cfg):
    donors = []
    for b in io.bundle_paths(a.donors):
        _, pmap = io.read_gt_bundle(b)
        donors.extend(i for i in io.gt_instances(pmap) if i.is_thing)
    bundles = io.bundle_paths(a.input)
    region = set(a.region_class or [])
    items = [(b, a.output, cfg, donors, a.n, _image_seed(a.seed, k), region) for k, b in enumerate(bundles)]
    return _pool_map(_augment_one, items, a.jobs)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="panoptic-ocp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed_required=False):
        p.add_argument("--config", default=None, help="YAML/JSON file overriding default constants")
        p.add_argument("--seed", type=int, required=seed_required, default=None)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--output", required=True)

    p = sub.add_parser("gen-targets", help="per-level supervision targets from GT bundles")
    p.add_argument("input")
    common(p)
    p.set_defaults(func=cmd_gen_targets)

    p = sub.add_parser("decode", help="decode head tensors into ranked proposals")
    p.add_argument("input")
    common(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("match", help="match predictions to GT with optional refinement")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--refine", dest="refine", action="store_true", default=True)
    p.add_argument("--no-refine", dest="refine", action="store_false")
    common(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("fuse", help="fuse thing and stuff predictions into panoptic maps")
    p.add_argument("input")
    p.add_argument("--no-nms", dest="nms", action="store_false", default=True)
    common(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="PQ/RQ/SQ report for predicted vs GT panoptic maps")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--classes", default=None, help="JSON class table {classes: [{id, is_thing}]}")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect-rate", help="thing detection rate binned by box diagonal")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    common(p)
    p.set_defaults(func=cmd_detect_rate)

    p = sub.add_parser("augment", help="copy-paste donor things into GT scenes")
    p.add_argument("input")
    p.add_argument("--donors", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--region-class", type=int, action="append", help="paste only where these classes are")
    common(p, seed_required=True)
    p.set_defaults(func=cmd_augment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        try:
            cfg = load_config(args.config) if args.config else Config()
        except (OSError, ValueError, TypeError) as exc:
            raise UsageError(f"bad config: {exc}") from exc
        args.func(args, cfg)
    except (BundleError, UsageError) as exc:
        _emit_error(exc.kind, exc.code, str(exc))
        return exc.code
    except Exception as exc:  # noqa: BLE001 - every failure must leave an error record
        _emit_error("internal", 1, f"{type(exc).__name__}: {exc}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
