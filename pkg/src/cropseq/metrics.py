"""Object-wise (plant-level) evaluation of predicted label masks.

Objects are 8-connected components of one class. Objects smaller than a
minimum ground area are dropped as noise. A ground-truth object is recalled
when more than half of its pixels carry the matching predicted class; a
predicted object is a true positive when more than half of its pixels carry
the matching ground-truth class.

Ground truth may carry an extra "intra-row weed" class that predictions
never emit; it is scored against the predicted weed class. Each predicted
weed object is attributed to whichever of the two weed classes covers more of
its pixels (ties go to plain weed).
"""
from dataclasses import dataclass, field
from typing import Dict

import numpy as np
from scipy import ndimage

__all__ = [
    "CLASS_NAMES", "ClassCounts", "ObjectWiseReport", "connected_components",
    "filter_small", "min_object_pixels", "object_report", "aggregate_reports",
]

CLASS_NAMES = {1: "crop", 2: "weed", 3: "intra_row_weed"}
_EIGHT = np.ones((3, 3), dtype=bool)


def connected_components(mask, c):
    """8-connected components of pixels equal to ``c``.

    Returns a list of ``(rows, cols)`` index arrays in raster order of each
    component's first pixel.
    """
    mask = np.asarray(mask)
    lab, n = ndimage.label(mask == c, structure=_EIGHT)
    if n == 0:
        return []
    order = np.argsort(lab, axis=None, kind="stable")
    flat = lab.reshape(-1)[order]
    starts = np.searchsorted(flat, np.arange(1, n + 1))
    ends = np.append(starts[1:], flat.size)
    w = mask.shape[1]
    out = []
    for s, e in zip(starts, ends):
        idx = order[s:e]
        out.append((idx // w, idx % w))
    return out


def min_object_pixels(min_area_cm2, resolution_mm):
    """Smallest pixel count whose ground area reaches ``min_area_cm2``."""
    px_cm2 = (resolution_mm / 10.0) ** 2
    return int(np.ceil(min_area_cm2 / px_cm2 - 1e-9))


def filter_small(objects, min_area_cm2=0.5, resolution_mm=1.0):
    """Keep objects whose area is at least ``min_area_cm2``."""
    thresh = min_object_pixels(min_area_cm2, resolution_mm)
    return [o for o in objects if len(o[0]) >= thresh]


@dataclass
class ClassCounts:
    n_gt: int = 0
    n_pred: int = 0
    matched_gt: int = 0
    true_pos: int = 0

    def __add__(self, other):
        return ClassCounts(
            self.n_gt + other.n_gt, self.n_pred + other.n_pred,
            self.matched_gt + other.matched_gt, self.true_pos + other.true_pos,
        )

    @property
    def recall(self):
        if self.n_gt == 0 or self.n_pred == 0:
            return 1.0 if self.n_gt == self.n_pred == 0 else 0.0
        return self.matched_gt / self.n_gt

    @property
    def precision(self):
        if self.n_gt == 0 or self.n_pred == 0:
            return 1.0 if self.n_gt == self.n_pred == 0 else 0.0
        return self.true_pos / self.n_pred

    @property
    def f1(self):
        p, r = self.precision, self.recall
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@dataclass
class ObjectWiseReport:
    counts: Dict[int, ClassCounts] = field(default_factory=dict)

    @property
    def classes(self):
        return sorted(self.counts)

    def recall(self, c):
        return self.counts[c].recall

    def precision(self, c):
        return self.counts[c].precision

    def f1(self, c):
        return self.counts[c].f1

    @property
    def average_f1(self):
        return float(np.mean([self.counts[c].f1 for c in self.classes]))

    def __add__(self, other):
        keys = set(self.counts) | set(other.counts)
        return ObjectWiseReport({
            k: self.counts.get(k, ClassCounts()) + other.counts.get(k, ClassCounts())
            for k in sorted(keys)
        })

    def as_dict(self):
        out = {"avg_f1": self.average_f1}
        for c in self.classes:
            name = CLASS_NAMES.get(c, f"class{c}")
            cc = self.counts[c]
            out.update({
                f"{name}.recall": cc.recall, f"{name}.precision": cc.precision,
                f"{name}.f1": cc.f1, f"{name}.gt_objects": cc.n_gt,
                f"{name}.pred_objects": cc.n_pred, f"{name}.matched_gt": cc.matched_gt,
                f"{name}.true_positives": cc.true_pos,
            })
        return out

    def to_kv(self):
        """Machine-readable ``key=value`` lines."""
        lines = []
        for k, v in self.as_dict().items():
            lines.append(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}")
        return "\n".join(lines) + "\n"

    def to_table(self):
        """Line-oriented text table with percentages."""
        head = f"{'class':<16}{'recall':>8}{'prec.':>8}{'F1':>8}{'GT':>6}{'pred':>6}"
        rows = [head]
        for c in self.classes:
            cc = self.counts[c]
            rows.append(
                f"{CLASS_NAMES.get(c, c):<16}{100 * cc.recall:>8.1f}{100 * cc.precision:>8.1f}"
                f"{100 * cc.f1:>8.1f}{cc.n_gt:>6d}{cc.n_pred:>6d}"
            )
        rows.append(f"{'avg F1':<16}{100 * self.average_f1:>24.1f}")
        return "\n".join(rows) + "\n"


def object_report(pred_mask, gt_mask, resolution_mm=1.0, min_area_cm2=0.5, intra_row=None):
    """Compare one predicted mask with its ground truth.

    ``intra_row`` enables the intra-row weed class (3) in the ground truth;
    by default it is enabled whenever ``gt_mask`` contains class 3.
    """
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ValueError(f"masks must be 2D and aligned, got {pred.shape} and {gt.shape}")
    if intra_row is None:
        intra_row = bool(np.any(gt == 3))
    classes = (1, 2, 3) if intra_row else (1, 2)
    pred_class = {1: 1, 2: 2, 3: 2}
    counts = {c: ClassCounts() for c in classes}

    for c in classes:
        objs = filter_small(connected_components(gt, c), min_area_cm2, resolution_mm)
        counts[c].n_gt = len(objs)
        target = pred_class[c]
        counts[c].matched_gt = sum(
            int(2 * np.count_nonzero(pred[o] == target) > len(o[0])) for o in objs
        )

    for p in sorted(set(pred_class[c] for c in classes)):
        candidates = [c for c in classes if pred_class[c] == p]
        for o in filter_small(connected_components(pred, p), min_area_cm2, resolution_mm):
            hits = {c: np.count_nonzero(gt[o] == c) for c in candidates}
            best = max(candidates, key=lambda c: (hits[c], -c))
            counts[best].n_pred += 1
            counts[best].true_pos += int(2 * hits[best] > len(o[0]))
    return ObjectWiseReport(counts)


def aggregate_reports(reports):
    """Sum object counts over many images (micro-averaged metrics)."""
    total = ObjectWiseReport()
    for r in reports:
        total = total + r
    return total
