"""Panoptic Quality evaluation.

Per image, ground-truth and predicted segments of the same class match when
their IoU exceeds 0.5, which makes the matching unique. Void GT pixels (id 0)
are removed from the union, and an unmatched prediction that lies mostly on
void is not counted as a false positive. Dataset scores are computed from the
summed per-class counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import mask_to_box
from .rasters import PanopticMap, Segment

# Key of the merged class used for class-agnostic thing scoring.
AGNOSTIC_THING = -1


@dataclass
class ClassCounts:
    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    is_thing: bool = False

    def __add__(self, other: "ClassCounts") -> "ClassCounts":
        return ClassCounts(
            self.iou_sum + other.iou_sum,
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.is_thing or other.is_thing,
        )

    @property
    def present(self) -> bool:
        return self.tp + self.fp + self.fn > 0

    def scores(self) -> tuple[float, float, float]:
        """``(pq, rq, sq)``; all 0 when the class has no true positives."""
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        if denom == 0:
            return 0.0, 0.0, 0.0
        sq = self.iou_sum / self.tp if self.tp else 0.0
        rq = self.tp / denom
        return self.iou_sum / denom, rq, sq


def merge_counts(*per_image) -> dict[int, ClassCounts]:
    total: dict[int, ClassCounts] = {}
    for counts in per_image:
        for cls, c in counts.items():
            total[cls] = total.get(cls, ClassCounts(is_thing=c.is_thing)) + c
    return total


@dataclass
class _Overlap:
    gt_area: dict
    pred_area: dict
    inter: dict  # (gt_id, pred_id) -> pixels, both nonzero
    pred_void: dict  # pred_id -> pixels on GT void


def _overlap(pred: PanopticMap, gt: PanopticMap) -> _Overlap:
    if pred.ids.shape != gt.ids.shape:
        raise ValueError(f"prediction {pred.ids.shape} and ground truth {gt.ids.shape} differ in size")
    g = gt.ids.reshape(-1)
    p = pred.ids.reshape(-1)
    base = int(p.max()) + 1 if p.size else 1
    pairs, counts = np.unique(g * base + p, return_counts=True)
    inter, pred_void = {}, {}
    for code, n in zip(pairs.tolist(), counts.tolist()):
        gid, pid = divmod(code, base)
        if pid == 0:
            continue
        if gid == 0:
            pred_void[pid] = n
        else:
            inter[(gid, pid)] = n
    return _Overlap(gt.areas(), pred.areas(), inter, pred_void)


def _segment_iou(ov: _Overlap, gid: int, pid: int) -> float:
    i = ov.inter.get((gid, pid), 0)
    union = ov.pred_area[pid] + ov.gt_area[gid] - i - ov.pred_void.get(pid, 0)
    return i / union if union > 0 else 0.0


def pq_evaluate(pred: PanopticMap, gt: PanopticMap, match_iou: float = 0.5) -> dict[int, ClassCounts]:
    """Per-class TP/FP/FN counts and matched-IoU sums for one image."""
    ov = _overlap(pred, gt)
    counts: dict[int, ClassCounts] = {}

    def bucket(seg: Segment) -> ClassCounts:
        if seg.class_id not in counts:
            counts[seg.class_id] = ClassCounts(is_thing=seg.is_thing)
        return counts[seg.class_id]

    matched_gt, matched_pred = set(), set()
    for gid, pid in ov.inter:
        gseg, pseg = gt.segments[gid], pred.segments[pid]
        if gseg.class_id != pseg.class_id:
            continue
        value = _segment_iou(ov, gid, pid)
        if value > match_iou:
            c = bucket(gseg)
            c.tp += 1
            c.iou_sum += value
            matched_gt.add(gid)
            matched_pred.add(pid)

    for gid in ov.gt_area:
        if gid not in matched_gt:
            bucket(gt.segments[gid]).fn += 1
    for pid, area in ov.pred_area.items():
        if pid in matched_pred:
            continue
        if ov.pred_void.get(pid, 0) / area > 0.5:
            continue
        bucket(pred.segments[pid]).fp += 1
    return counts


def agnostic_view(pmap: PanopticMap) -> PanopticMap:
    """The same map with every thing segment relabeled to one merged class."""
    table = {
        sid: Segment(AGNOSTIC_THING, True) if seg.is_thing else seg for sid, seg in pmap.segments.items()
    }
    return PanopticMap(pmap.ids, table)


def class_agnostic(pred: PanopticMap, gt: PanopticMap, match_iou: float = 0.5) -> ClassCounts | None:
    """Counts of the merged thing class; ``None`` when neither map has things."""
    counts = pq_evaluate(agnostic_view(pred), agnostic_view(gt), match_iou)
    return counts.get(AGNOSTIC_THING)


@dataclass(frozen=True)
class GroupScores:
    pq: float
    rq: float
    sq: float
    n: int


@dataclass
class PqReport:
    per_class: dict = field(default_factory=dict)  # class_id -> (ClassCounts, (pq, rq, sq))
    groups: dict = field(default_factory=dict)  # "All" / "Th" / "Th_a" / "St" -> GroupScores | None
    size_bins: list | None = None

    def to_dict(self) -> dict:
        out = {"per_class": {}, "groups": {}}
        for cls in sorted(self.per_class):
            c, (pq, rq, sq) = self.per_class[cls]
            out["per_class"][str(cls)] = {
                "is_thing": c.is_thing, "tp": c.tp, "fp": c.fp, "fn": c.fn,
                "iou_sum": c.iou_sum, "pq": pq, "rq": rq, "sq": sq,
            }
        for name, g in self.groups.items():
            out["groups"][name] = None if g is None else {"pq": g.pq, "rq": g.rq, "sq": g.sq, "n": g.n}
        if self.size_bins is not None:
            out["size_bins"] = [b.to_dict() for b in self.size_bins]
        return out

    def table(self) -> str:
        """Fixed-width PQ/RQ/SQ table, columns All / Th / Th_a / St, values in percent."""
        cols = ["All", "Th", "Th_a", "St"]
        lines = ["      " + "".join(f"{c:>8}" for c in cols)]
        for metric in ("pq", "rq", "sq"):
            cells = []
            for c in cols:
                g = self.groups.get(c)
                cells.append(f"{'-':>8}" if g is None else f"{100.0 * getattr(g, metric):8.1f}")
            lines.append(f"{metric.upper():<6}" + "".join(cells))
        return "\n".join(lines) + "\n"


def _mean(rows) -> GroupScores | None:
    if not rows:
        return None
    arr = np.array(rows, dtype=np.float64)
    pq, rq, sq = arr.mean(axis=0)
    return GroupScores(float(pq), float(rq), float(sq), len(rows))


def aggregate(counts, class_table: dict | None = None, agnostic=None) -> PqReport:
    """Dataset report from per-class counts.

    ``counts`` is one merged ``{class_id: ClassCounts}`` or a list of
    per-image dicts. A class enters the averages when it has at least one
    TP, FP or FN. ``class_table`` (``class_id -> is_thing``) overrides the
    thing flags recorded in the counts. ``agnostic`` holds the merged-thing
    counts for Th_a, as one :class:`ClassCounts` or a list of per-image
    values (``None`` entries skipped).
    """
    if isinstance(counts, (list, tuple)):
        counts = merge_counts(*counts)
    report = PqReport()
    rows = {"All": [], "Th": [], "St": []}
    for cls in sorted(counts):
        c = counts[cls]
        if class_table is not None and cls in class_table:
            c = ClassCounts(c.iou_sum, c.tp, c.fp, c.fn, bool(class_table[cls]))
        if not c.present:
            continue
        s = c.scores()
        report.per_class[cls] = (c, s)
        rows["All"].append(s)
        rows["Th" if c.is_thing else "St"].append(s)
    report.groups = {name: _mean(r) for name, r in rows.items()}

    if isinstance(agnostic, (list, tuple)):
        parts = [a for a in agnostic if a is not None]
        agnostic = None
        for a in parts:
            agnostic = a if agnostic is None else agnostic + a
    if agnostic is not None and agnostic.present:
        pq, rq, sq = agnostic.scores()
        report.groups["Th_a"] = GroupScores(pq, rq, sq, 1)
    else:
        report.groups["Th_a"] = None
    report.groups = {k: report.groups[k] for k in ("All", "Th", "Th_a", "St")}
    return report


@dataclass
class SizeBin:
    lo: float
    hi: float
    detected: int = 0
    total: int = 0

    @property
    def rate(self) -> float | None:
        return self.detected / self.total if self.total else None

    def to_dict(self) -> dict:
        hi = None if math.isinf(self.hi) else self.hi
        return {"lo": self.lo, "hi": hi, "detected": self.detected, "total": self.total, "rate": self.rate}


def detected_things(pred: PanopticMap, gt: PanopticMap, match_iou: float = 0.5):
    """``(gt_id, box_diagonal, detected)`` for every GT thing segment."""
    ov = _overlap(pred, gt)
    hits = set()
    for gid, pid in ov.inter:
        gseg, pseg = gt.segments[gid], pred.segments[pid]
        if gseg.is_thing and gseg.class_id == pseg.class_id and _segment_iou(ov, gid, pid) > match_iou:
            hits.add(gid)
    out = []
    for gid in sorted(ov.gt_area):
        if gt.segments[gid].is_thing:
            diag = mask_to_box(gt.ids == gid).diagonal
            out.append((gid, diag, gid in hits))
    return out


def detection_rate_by_size(pairs, bins=(0.0, 32.0, 64.0, 128.0, 256.0, 512.0, math.inf), match_iou=0.5):
    """Per-bin recall of GT things over ``(pred, gt)`` map pairs.

    Bin ``k`` holds diagonals in ``[bins[k], bins[k+1])``; the rate of an
    empty bin is ``None``.
    """
    edges = [float(b) for b in bins]
    if any(b >= a for a, b in zip(edges[1:], edges[:-1])):
        raise ValueError("bin edges must be strictly increasing")
    out = [SizeBin(lo, hi) for lo, hi in zip(edges[:-1], edges[1:])]
    for pred, gt in pairs:
        for _, diag, hit in detected_things(pred, gt, match_iou):
            for b in out:
                if b.lo <= diag < b.hi:
                    b.total += 1
                    b.detected += int(hit)
                    break
    return out
