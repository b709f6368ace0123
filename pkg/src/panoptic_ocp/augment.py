"""Copy-paste augmentation of ground-truth scenes."""

from __future__ import annotations

import warnings

import numpy as np

from .geometry import mask_to_box
from .rasters import BinaryMask
from .targets import GtInstance


class PlacementWarning(UserWarning):
    """A donor could not be placed and was skipped."""


def _crop(mask: np.ndarray) -> np.ndarray:
    box = mask_to_box(mask)
    x1, y1, x2, y2 = (int(v) for v in box.corners())
    return mask[y1:y2, x1:x2]


def copy_paste(instances, height: int, width: int, donors, region=None, n: int = 1,
               seed: int = 0, max_retries: int = 50) -> list[GtInstance]:
    """Paste ``n`` randomly drawn donor objects into a scene.

    Each donor mask is cropped to its box and dropped at a uniform random
    offset inside the image. With a ``region`` mask, a placement is accepted
    only if the centroid pixel of the pasted mask lies in the region; after
    ``max_retries`` rejected offsets the donor is skipped with a
    :class:`PlacementWarning`. Pasted objects occlude earlier content;
    instances occluded entirely are removed. Returns the new instance list.
    """
    scene = [i.mask.to_dense() for i in instances]
    meta = [(i.class_id, i.is_thing) for i in instances]
    if n <= 0 or not donors:
        return list(instances)
    region_dense = None
    if region is not None:
        region_dense = region.to_dense() if hasattr(region, "to_dense") else np.asarray(region, bool)
        if not region_dense.any():
            raise ValueError("paste region is empty")

    rng = np.random.default_rng(seed)
    for _ in range(n):
        donor = donors[int(rng.integers(len(donors)))]
        patch = _crop(donor.mask.to_dense())
        ph, pw = patch.shape
        if ph > height or pw > width:
            warnings.warn(f"donor of size {pw}x{ph} does not fit the image", PlacementWarning, stacklevel=2)
            continue
        py, px = np.nonzero(patch)
        cy_off, cx_off = int(py.mean()), int(px.mean())
        placed = None
        for _ in range(max_retries):
            top = int(rng.integers(0, height - ph + 1))
            left = int(rng.integers(0, width - pw + 1))
            if region_dense is None or region_dense[top + cy_off, left + cx_off]:
                placed = (top, left)
                break
        if placed is None:
            warnings.warn("no placement inside the paste region", PlacementWarning, stacklevel=2)
            continue
        top, left = placed
        full = np.zeros((height, width), dtype=bool)
        full[top : top + ph, left : left + pw] = patch
        scene = [m & ~full for m in scene]
        keep = [k for k, m in enumerate(scene) if m.any()]
        scene = [scene[k] for k in keep] + [full]
        meta = [meta[k] for k in keep] + [(donor.class_id, donor.is_thing)]

    return [GtInstance(c, t, BinaryMask.from_dense(m)) for (c, t), m in zip(meta, scene)]
