"""On-disk formats.

Tensor file: one ASCII header line ``v1 <h> <w> <c> <stride>`` followed by
``h*w*c`` little-endian float32 values, row-major, channel-last.

Bundles are directories holding ``manifest.json`` (always carrying
``format_version``) plus any tensor files it references by relative path.
Masks travel inside manifests as ``{"size": [h, w], "counts": [start, len, ...]}``.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .geometry import Box
from .mask_decode import InstancePrediction
from .rasters import BinaryMask, PanopticMap, Segment
from .targets import GtInstance

FORMAT_VERSION = 1
MANIFEST = "manifest.json"


class BundleError(Exception):
    """Base class for unreadable inputs; ``code`` is the CLI exit status."""

    code = 1
    kind = "error"


class MalformedManifestError(BundleError):
    code = 3
    kind = "malformed_manifest"


class ShapeMismatchError(BundleError):
    code = 4
    kind = "shape_mismatch"


class MissingFileError(BundleError):
    code = 5
    kind = "missing_file"


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def write_json(path, obj) -> None:
    atomic_write_bytes(path, dumps_json(obj).encode())


def read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"{path} does not exist")
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise MalformedManifestError(f"{path}: {exc}") from exc


def encode_tensor(array: np.ndarray, stride: int = 0) -> bytes:
    a = np.asarray(array)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"tensors are stored as (h, w, c), got shape {a.shape}")
    h, w, c = a.shape
    header = f"v1 {h} {w} {c} {int(stride)}\n".encode()
    return header + np.ascontiguousarray(a, dtype="<f4").tobytes()


def write_tensor(path, array: np.ndarray, stride: int = 0) -> None:
    atomic_write_bytes(path, encode_tensor(array, stride))


def read_tensor(path) -> tuple[np.ndarray, int]:
    """Return ``((h, w, c) float64 array, stride)``."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"tensor file {path} does not exist")
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    parts = raw[:nl].decode(errors="replace").split() if nl >= 0 else []
    if len(parts) != 5 or parts[0] != "v1":
        raise MalformedManifestError(f"{path}: bad tensor header")
    try:
        h, w, c, stride = (int(v) for v in parts[1:])
    except ValueError as exc:
        raise MalformedManifestError(f"{path}: bad tensor header") from exc
    payload = raw[nl + 1 :]
    if len(payload) != 4 * h * w * c:
        raise ShapeMismatchError(f"{path}: header declares {h}x{w}x{c} but payload has {len(payload) // 4} values")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(h, w, c)
    return data, stride


def mask_to_json(mask: BinaryMask) -> dict:
    return {"size": [mask.height, mask.width], "counts": mask.to_counts()}


def mask_from_json(obj, expect_size=None) -> BinaryMask:
    try:
        h, w = obj["size"]
        mask = BinaryMask.from_counts(h, w, obj["counts"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedManifestError(f"bad RLE mask record: {exc}") from exc
    if expect_size is not None and (mask.height, mask.width) != tuple(expect_size):
        raise ShapeMismatchError(f"mask size {(mask.height, mask.width)} != declared {tuple(expect_size)}")
    return mask


def _require(manifest: dict, *keys):
    missing = [k for k in keys if k not in manifest]
    if missing:
        raise MalformedManifestError(f"manifest lacks keys {missing}")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise MalformedManifestError(f"unsupported format_version {version!r}")


# --- panoptic maps -------------------------------------------------------


def panoptic_to_json(pmap: PanopticMap, image_id: str = "") -> dict:
    segments = []
    for sid in sorted(pmap.segments):
        seg = pmap.segments[sid]
        segments.append(
            {
                "id": sid,
                "class_id": seg.class_id,
                "is_thing": seg.is_thing,
                "mask": mask_to_json(BinaryMask.from_dense(pmap.ids == sid)),
            }
        )
    return {
        "format_version": FORMAT_VERSION,
        "image_id": image_id,
        "height": pmap.height,
        "width": pmap.width,
        "segments": segments,
    }


def panoptic_from_json(obj: dict) -> PanopticMap:
    _require(obj, "height", "width", "segments")
    h, w = int(obj["height"]), int(obj["width"])
    entries = []
    try:
        for rec in obj["segments"]:
            seg = Segment(int(rec["class_id"]), bool(rec["is_thing"]))
            entries.append((int(rec["id"]), seg, mask_from_json(rec["mask"], (h, w))))
    except (KeyError, TypeError) as exc:
        raise MalformedManifestError(f"bad segment record: {exc}") from exc
    ids = np.zeros((h, w), dtype=np.int64)
    table = {}
    for sid, seg, mask in entries:
        dense = mask.to_dense()
        if sid == 0 or sid in table:
            raise MalformedManifestError(f"segment id {sid} is reserved or duplicated")
        if np.any(ids[dense] != 0):
            raise MalformedManifestError(f"segment {sid} overlaps an earlier segment")
        ids[dense] = sid
        table[sid] = seg
    return PanopticMap(ids, table)


def gt_instances(pmap: PanopticMap) -> list[GtInstance]:
    """Non-empty segments of a panoptic map as GT instances, in id order."""
    out = []
    for sid in sorted(pmap.segments):
        mask = BinaryMask.from_dense(pmap.ids == sid)
        if mask.area:
            seg = pmap.segments[sid]
            out.append(GtInstance(seg.class_id, seg.is_thing, mask))
    return out


def instances_to_panoptic(height: int, width: int, instances) -> PanopticMap:
    """Later instances overwrite earlier ones; ids are assigned in order from 1."""
    entries = [(k + 1, Segment(i.class_id, i.is_thing), i.mask) for k, i in enumerate(instances)]
    return PanopticMap.from_segment_masks(height, width, entries)


# --- bundles -------------------------------------------------------------


def is_bundle(path) -> bool:
    return (Path(path) / MANIFEST).is_file()


def bundle_paths(path) -> list[Path]:
    """A single bundle, or the sorted bundle subdirectories of a collection."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"{path} does not exist")
    if is_bundle(path):
        return [path]
    subs = sorted(p for p in path.iterdir() if p.is_dir() and is_bundle(p))
    if not subs:
        raise MissingFileError(f"{path} holds no {MANIFEST}")
    return subs


def read_manifest(bundle) -> dict:
    return read_json(Path(bundle) / MANIFEST)


def read_gt_bundle(bundle) -> tuple[str, PanopticMap]:
    m = read_manifest(bundle)
    return str(m.get("image_id", Path(bundle).name)), panoptic_from_json(m)


def write_panoptic_bundle(bundle, pmap: PanopticMap, image_id: str) -> None:
    write_json(Path(bundle) / MANIFEST, panoptic_to_json(pmap, image_id))


def prediction_to_json(pred: InstancePrediction) -> dict:
    mask = BinaryMask.from_dense(np.asarray(pred.mask) > 0.5)
    return {
        "class_probs": [float(v) for v in pred.class_probs],
        "is_thing": bool(pred.is_thing),
        "box": [float(v) for v in pred.box.as_array()],
        "mask": mask_to_json(mask),
    }


def prediction_from_json(rec: dict, size) -> InstancePrediction:
    try:
        probs = np.asarray(rec["class_probs"], dtype=np.float64)
        cx, cy, w, h = (float(v) for v in rec["box"])
        mask = mask_from_json(rec["mask"], size).to_dense().astype(np.float64)
        return InstancePrediction(probs, Box(cx, cy, w, h, normalized=True), mask, bool(rec["is_thing"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, BundleError):
            raise
        raise MalformedManifestError(f"bad prediction record: {exc}") from exc


def read_prediction_bundle(bundle) -> tuple[str, tuple[int, int], list[InstancePrediction]]:
    m = read_manifest(bundle)
    _require(m, "height", "width", "predictions")
    size = (int(m["height"]), int(m["width"]))
    preds = [prediction_from_json(r, size) for r in m["predictions"]]
    return str(m.get("image_id", Path(bundle).name)), size, preds


def write_prediction_bundle(bundle, image_id: str, size, preds) -> None:
    write_json(
        Path(bundle) / MANIFEST,
        {
            "format_version": FORMAT_VERSION,
            "image_id": image_id,
            "height": int(size[0]),
            "width": int(size[1]),
            "predictions": [prediction_to_json(p) for p in preds],
        },
    )


HEAD_KEYS = ("center", "regression", "objectness", "features")


def read_heads_bundle(bundle):
    """Read per-level head tensors.

    Returns ``(image_id, (width, height), {stride: LevelHeads}, stuff or None)``.
    """
    from .ocp_decode import LevelHeads
    from .rasters import FeatureMap, RegressionMap, ScalarMap

    bundle = Path(bundle)
    m = read_manifest(bundle)
    _require(m, "height", "width", "levels")
    heads = {}
    for key, files in m["levels"].items():
        try:
            stride = int(key)
            paths = {k: bundle / files[k] for k in HEAD_KEYS}
        except (KeyError, ValueError, TypeError) as exc:
            raise MalformedManifestError(f"bad level entry {key!r}: {exc}") from exc
        arrays = {}
        for k, p in paths.items():
            data, file_stride = read_tensor(p)
            if file_stride != stride:
                raise ShapeMismatchError(f"{p} records stride {file_stride}, manifest says {stride}")
            arrays[k] = data
        if arrays["center"].shape[2] != 1 or arrays["objectness"].shape[2] != 1:
            raise ShapeMismatchError(f"level {stride}: center/objectness must have one channel")
        if arrays["regression"].shape[2] != 4:
            raise ShapeMismatchError(f"level {stride}: regression must have four channels")
        try:
            heads[stride] = LevelHeads(
                ScalarMap(stride, arrays["center"][..., 0]),
                RegressionMap(stride, arrays["regression"]),
                ScalarMap(stride, arrays["objectness"][..., 0]),
                FeatureMap(stride, arrays["features"]),
            )
        except ValueError as exc:
            raise ShapeMismatchError(f"level {stride}: {exc}") from exc
    stuff = None
    if m.get("stuff_queries"):
        data, _ = read_tensor(bundle / m["stuff_queries"])
        stuff = data[:, :, 0]
    return str(m.get("image_id", bundle.name)), (int(m["width"]), int(m["height"])), heads, stuff


def write_heads_bundle(bundle, image_id: str, image_size, heads: dict, stuff=None) -> None:
    bundle = Path(bundle)
    width, height = image_size
    levels = {}
    for stride in sorted(heads):
        lh = heads[stride]
        files = {}
        for key, arr in (
            ("center", lh.center.data),
            ("regression", lh.regression.data),
            ("objectness", lh.objectness.data),
            ("features", lh.features.data),
        ):
            name = f"{key}_s{stride}.bin"
            write_tensor(bundle / name, arr, stride)
            files[key] = name
        levels[str(stride)] = files
    manifest = {
        "format_version": FORMAT_VERSION,
        "image_id": image_id,
        "height": int(height),
        "width": int(width),
        "levels": levels,
    }
    if stuff is not None:
        write_tensor(bundle / "stuff_queries.bin", np.asarray(stuff)[:, :, None])
        manifest["stuff_queries"] = "stuff_queries.bin"
    write_json(bundle / MANIFEST, manifest)
