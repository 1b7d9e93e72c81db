"""Detection metrics: IoU, greedy matching, P/R/F1, 101-point AP, mAP50 and mAP50:95.

Conventions
-----------
* Matching: detections are visited by descending confidence (stable for
  ties); each takes the unmatched same-class ground truth with the highest
  IoU >= threshold, ties going to the lower GT index.
* P, R and F1 are 0 whenever their denominator is 0.
* AP is the mean of interpolated precision at recall 0, 0.01, ..., 1.00,
  ranked over all images. Classes without ground truth are left out of the
  class mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

CLASS_NAMES = ("FL", "PB", "DB", "FB")
IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


class LabelParseError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class GroundTruth:
    box: Box
    class_id: int


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    flags: list[bool]  # per detection, in input order
    assignment: list[int | None]  # matched GT index per detection


def _rank(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: -dets[i].confidence)


def match(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thr: float) -> MatchResult:
    """Greedy confidence-ordered matching within one image."""
    taken = [False] * len(gts)
    assignment: list[int | None] = [None] * len(dets)
    for i in _rank(dets):
        d = dets[i]
        best, best_iou = None, iou_thr
        for j, g in enumerate(gts):
            if taken[j] or g.class_id != d.class_id:
                continue
            v = iou(d.box, g.box)
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = j, v
        if best is not None:
            taken[best] = True
            assignment[i] = best
    flags = [a is not None for a in assignment]
    tp = sum(flags)
    return MatchResult(tp, len(dets) - tp, len(gts) - tp, flags, assignment)


def prf1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def _as_images(items) -> list[list]:
    items = list(items)
    if items and not isinstance(items[0], (list, tuple)):
        return [items]
    return [list(x) for x in items]


def interpolated_ap(flags_ranked: Sequence[bool], npos: int) -> float:
    """101-point interpolated AP from TP flags already sorted by descending confidence."""
    if npos == 0:
        raise ValueError("AP undefined without ground truth")
    flags = np.asarray(flags_ranked, dtype=bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    precision = tp / (tp + fp)
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # recall >= k/100  <=>  100 * tp >= k * npos, compared in integers
    idx = np.searchsorted(100 * tp, np.arange(101) * npos, side="left")
    sampled = np.where(idx < tp.size, envelope[np.minimum(idx, tp.size - 1)], 0.0)
    return float(sampled.mean())


def class_aps(dets, gts, iou_thr: float) -> dict[int, float]:
    """AP per class present in the ground truth, pooled over all images."""
    det_images, gt_images = _as_images(dets), _as_images(gts)
    if len(det_images) != len(gt_images):
        if not det_images:
            det_images = [[] for _ in gt_images]
        else:
            raise ValueError(f"{len(det_images)} detection lists for {len(gt_images)} images")
    classes = sorted({g.class_id for img in gt_images for g in img})
    out = {}
    for c in classes:
        scored: list[tuple[float, int, bool]] = []
        npos = 0
        for d_img, g_img in zip(det_images, gt_images):
            d_c = [d for d in d_img if d.class_id == c]
            g_c = [g for g in g_img if g.class_id == c]
            npos += len(g_c)
            res = match(d_c, g_c, iou_thr)
            base = len(scored)
            scored.extend((d.confidence, base + k, f) for k, (d, f) in enumerate(zip(d_c, res.flags)))
        scored.sort(key=lambda t: (-t[0], t[1]))
        out[c] = interpolated_ap([f for _, _, f in scored], npos)
    return out


def average_precision(dets, gts, iou_thr: float = 0.5) -> float:
    """Class-mean AP at one IoU threshold (classes without GT excluded)."""
    aps = class_aps(dets, gts, iou_thr)
    return float(np.mean(list(aps.values()))) if aps else 0.0


def map50(dets, gts) -> float:
    return average_precision(dets, gts, 0.5)


def map50_95(dets, gts) -> float:
    return float(np.mean([average_precision(dets, gts, t) for t in IOU_THRESHOLDS]))


@dataclass
class ClassMetrics:
    class_id: int
    name: str
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    ap: dict[str, float] = field(default_factory=dict)


@dataclass
class MetricsReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    map50: float
    map50_95: float
    per_class: list[ClassMetrics]
    num_images: int
    iou_threshold: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(dets, gts, num_classes: int = 4, iou_thr: float = 0.5) -> MetricsReport:
    """Counts and P/R/F1 at ``iou_thr`` over all detections given, plus AP at every threshold."""
    det_images, gt_images = _as_images(dets), _as_images(gts)
    if not det_images:
        det_images = [[] for _ in gt_images]
    per_class_counts = {c: [0, 0, 0] for c in range(num_classes)}
    for d_img, g_img in zip(det_images, gt_images):
        for c in range(num_classes):
            res = match([d for d in d_img if d.class_id == c], [g for g in g_img if g.class_id == c], iou_thr)
            per_class_counts[c][0] += res.tp
            per_class_counts[c][1] += res.fp
            per_class_counts[c][2] += res.fn
    aps_by_thr = {t: class_aps(det_images, gt_images, t) for t in IOU_THRESHOLDS}
    per_class = []
    for c in range(num_classes):
        tp, fp, fn = per_class_counts[c]
        p, r, f1 = prf1(tp, fp, fn)
        name = CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c)
        ap = {f"{t:.2f}": aps_by_thr[t][c] for t in IOU_THRESHOLDS if c in aps_by_thr[t]}
        per_class.append(ClassMetrics(c, name, tp, fp, fn, p, r, f1, ap))
    tp = sum(v[0] for v in per_class_counts.values())
    fp = sum(v[1] for v in per_class_counts.values())
    fn = sum(v[2] for v in per_class_counts.values())
    p, r, f1 = prf1(tp, fp, fn)
    means = [float(np.mean(list(a.values()))) if a else 0.0 for a in aps_by_thr.values()]
    return MetricsReport(tp, fp, fn, p, r, f1, means[0], float(np.mean(means)), per_class, len(gt_images), iou_thr)


# -- YOLO label text ---------------------------------------------------------------


def parse_yolo_labels(text: str, image_w: float, image_h: float) -> list[GroundTruth]:
    """Parse ``class cx cy w h`` lines (normalised) into pixel corner boxes."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise LabelParseError(f"line {lineno}: expected 5 fields 'class cx cy w h', got {len(parts)}")
        try:
            cls = int(parts[0])
            cx, cy, w, h = (float(v) for v in parts[1:])
        except ValueError:
            raise LabelParseError(f"line {lineno}: could not parse {line!r}") from None
        if cls < 0:
            raise LabelParseError(f"line {lineno}: negative class id {cls}")
        for label, v in (("center x", cx), ("center y", cy)):
            if not 0.0 <= v <= 1.0:
                raise LabelParseError(f"line {lineno}: {label} out of range [0, 1]: {v}")
        for label, v in (("width", w), ("height", h)):
            if not 0.0 < v <= 1.0:
                raise LabelParseError(f"line {lineno}: {label} out of range (0, 1]: {v}")
        box = Box((cx - w / 2) * image_w, (cy - h / 2) * image_h, (cx + w / 2) * image_w, (cy + h / 2) * image_h)
        out.append(GroundTruth(box, cls))
    return out


def serialize_yolo_labels(gts: Sequence[GroundTruth], image_w: float, image_h: float) -> str:
    lines = []
    for g in gts:
        b = g.box
        cx = (b.x1 + b.x2) / 2 / image_w
        cy = (b.y1 + b.y2) / 2 / image_h
        w = (b.x2 - b.x1) / image_w
        h = (b.y2 - b.y1) / image_h
        lines.append(f"{g.class_id} {cx!r} {cy!r} {w!r} {h!r}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_predictions(text: str) -> list[Detection]:
    """Parse ``class conf x1 y1 x2 y2`` lines (pixels)."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 6:
            raise LabelParseError(f"line {lineno}: expected 6 fields 'class conf x1 y1 x2 y2', got {len(parts)}")
        try:
            cls = int(parts[0])
            conf, x1, y1, x2, y2 = (float(v) for v in parts[1:])
            out.append(Detection(Box(x1, y1, x2, y2), cls, conf))
        except ValueError as e:
            raise LabelParseError(f"line {lineno}: {e}") from None
    return out


def serialize_predictions(dets: Sequence[Detection]) -> str:
    return "".join(f"{d.class_id} {d.confidence!r} {d.box.x1!r} {d.box.y1!r} {d.box.x2!r} {d.box.y2!r}\n" for d in dets)
