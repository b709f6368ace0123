"""Greedy confidence-ordered fusion of thing and stuff predictions."""

from __future__ import annotations

import numpy as np

from .config import FusionConfig
from .rasters import PanopticMap, Segment


def fuse(things, stuffs, config: FusionConfig = FusionConfig(), size=None) -> PanopticMap:
    """Paste predictions into one panoptic map.

    Predictions are visited by descending confidence (ties: things before
    stuff, then input order). Each claims its above-threshold pixels that are
    still free; it is dropped if less than ``retention`` of its mask survives,
    and a stuff prediction is also dropped if fewer than ``stuff_min_area``
    pixels survive. Stuff predictions of one class share a segment id.

    All masks must share the image resolution; ``size=(height, width)`` is
    required only when there are no predictions to infer it from.
    """
    if size is None:
        if not things and not stuffs:
            raise ValueError("cannot infer the image size without predictions")
        size = np.asarray((list(things) + list(stuffs))[0].mask).shape
    height, width = size
    entries = [(p, 0, i) for i, p in enumerate(things)] + [(p, 1, i) for i, p in enumerate(stuffs)]
    entries.sort(key=lambda e: (-e[0].confidence, e[1], e[2]))

    ids = np.zeros((height, width), dtype=np.int64)
    claimed = np.zeros((height, width), dtype=bool)
    table: dict[int, Segment] = {}
    stuff_ids: dict[int, int] = {}
    next_id = 1
    for pred, kind, _ in entries:
        if pred.confidence < config.confidence_floor:
            continue
        mask = np.asarray(pred.mask)
        if mask.shape != (height, width):
            raise ValueError(f"prediction mask {mask.shape} does not match image {(height, width)}")
        fg = mask > config.mask_threshold
        area = int(fg.sum())
        if area == 0:
            continue
        free = fg & ~claimed
        kept = int(free.sum())
        if kept == 0 or kept / area < config.retention:
            continue
        is_thing = kind == 0
        if not is_thing and kept < config.stuff_min_area:
            continue
        label = pred.label
        if is_thing:
            seg_id = next_id
            next_id += 1
        elif label in stuff_ids:
            seg_id = stuff_ids[label]
        else:
            seg_id = stuff_ids[label] = next_id
            next_id += 1
        ids[free] = seg_id
        claimed |= free
        table[seg_id] = Segment(label, is_thing)
    return PanopticMap(ids, table)
