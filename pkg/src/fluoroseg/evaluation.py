"""COCO-style detection and mask evaluation swept over IoU thresholds.

Matching is greedy in descending score order: each detection takes the
unmatched ground-truth instance of its category with the highest IoU at or
above the threshold. AP is the 101-point interpolated area under the
precision/recall curve; mAP averages AP over categories and then thresholds.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .coco import CocoDataset
from .errors import ContractError, ShapeError, ValidationError
from .segmenters.common import Detection, box_iou

DEFAULT_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
KINDS = ("box", "mask")
AGNOSTIC = "implant"


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = np.count_nonzero(a & b)
    union = np.count_nonzero(a | b)
    return inter / union if union else 0.0


def iou(kind: str, a, b) -> float:
    if kind == "box":
        return box_iou(a, b)
    if kind == "mask":
        return mask_iou(np.asarray(a, bool), np.asarray(b, bool))
    raise ValueError(f"unknown IoU kind {kind!r}")


@dataclass
class GtInstance:
    category: str
    bbox: tuple
    mask: np.ndarray
    id: int = 0


def _region(obj, kind):
    return obj.bbox if kind == "box" else obj.mask


def match_detections(dets: Sequence[Detection], gts: Sequence[GtInstance], iou_threshold: float, kind: str) -> list[bool]:
    """True for every detection that claims a ground-truth instance."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ContractError("iou_threshold must lie in (0, 1]")
    if any(dets[i].score < dets[i + 1].score for i in range(len(dets) - 1)):
        raise ContractError("detections must be sorted by descending score")
    taken = [False] * len(gts)
    flags = []
    for d in dets:
        best, best_iou = -1, iou_threshold
        for j, g in enumerate(gts):
            if taken[j] or g.category != d.category:
                continue
            v = iou(kind, _region(d, kind), _region(g, kind))
            # strict > keeps the earliest GT on ties; the first candidate only needs >= threshold
            if v > best_iou or (best < 0 and v >= iou_threshold):
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
        flags.append(best >= 0)
    return flags


def precision_recall(flags: Sequence[bool], positives: int) -> list[tuple[float, float]]:
    tp = np.cumsum(np.asarray(flags, dtype=np.int64))
    ranks = np.arange(1, len(flags) + 1)
    if positives == 0:
        return [(0.0, float(p)) for p in tp / ranks]
    return [(float(r), float(p)) for r, p in zip(tp / positives, tp / ranks)]


def average_precision(flags: Sequence[bool], positives: int) -> float | None:
    """101-point interpolated AP in [0, 1]; None when there is nothing to score."""
    if positives < 0:
        raise ValueError("positives must be non-negative")
    n = len(flags)
    if positives == 0:
        return None if n == 0 else 0.0
    if n == 0:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.int64))
    precision = tp / np.arange(1, n + 1)
    # envelope: best precision at this rank or any later one
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for k in range(101):
        # recall >= k/100, compared exactly in integers
        idx = np.flatnonzero(tp * 100 >= k * positives)
        total += envelope[idx[0]] if idx.size else 0.0
    return total / 101


@dataclass
class ApReport:
    thresholds: tuple[float, ...]
    kinds: tuple[str, ...]
    categories: tuple[str, ...]
    per_entry: dict[tuple[str, float, str], float | None] = field(default_factory=dict)

    def map_by_threshold(self, kind: str) -> dict[float, float | None]:
        out = {}
        for t in self.thresholds:
            vals = [self.per_entry.get((c, t, kind)) for c in self.categories]
            vals = [v for v in vals if v is not None]
            out[t] = float(np.mean(vals)) if vals else None
        return out

    @property
    def map_by_kind(self) -> dict[str, float | None]:
        out = {}
        for kind in self.kinds:
            vals = [v for v in self.map_by_threshold(kind).values() if v is not None]
            out[kind] = float(np.mean(vals)) if vals else None
        return out

    def to_json(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "categories": list(self.categories),
            "per_threshold": {k: {f"{t:.2f}": v for t, v in self.map_by_threshold(k).items()} for k in self.kinds},
            "per_category": {
                k: {c: {f"{t:.2f}": self.per_entry.get((c, t, k)) for t in self.thresholds} for c in self.categories}
                for k in self.kinds
            },
            "summary": {f"{k}_mAP": v for k, v in self.map_by_kind.items()},
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)


def _ground_truth(truth: CocoDataset, class_agnostic: bool) -> dict[int, list[GtInstance]]:
    names = dict(truth.categories)
    out: dict[int, list[GtInstance]] = {im.id: [] for im in truth.images}
    for a in sorted(truth.annotations, key=lambda a: a.id):
        cat = AGNOSTIC if class_agnostic else names[a.category_id]
        out[a.image_id].append(GtInstance(cat, tuple(a.bbox), a.mask(), a.id))
    return out


def evaluate(
    preds: Mapping[int, Sequence[Detection]],
    truth: CocoDataset,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    kinds: Sequence[str] = KINDS,
    class_agnostic: bool = False,
) -> ApReport:
    """AP per (category, threshold, kind) pooled over all images, on a 0-100 scale."""
    thresholds = tuple(float(t) for t in thresholds)
    if not thresholds or any(not 0.0 < t <= 1.0 for t in thresholds):
        raise ValueError("thresholds must be a non-empty list in (0, 1]")
    kinds = tuple(kinds)
    if not kinds or any(k not in KINDS for k in kinds):
        raise ValueError(f"kinds must be drawn from {KINDS}")
    image_ids = {im.id for im in truth.images}
    unknown = set(preds) - image_ids
    if unknown:
        raise ValidationError(f"predictions reference unknown image ids {sorted(unknown)[:5]}")

    categories = (AGNOSTIC,) if class_agnostic else tuple(n for _, n in truth.categories)
    gts = _ground_truth(truth, class_agnostic)
    dets: dict[int, list[Detection]] = {}
    for image_id, ds in preds.items():
        ranked = sorted(enumerate(ds), key=lambda p: (-p[1].score, p[0]))
        out = []
        for _, d in ranked:
            if class_agnostic:
                d = Detection(AGNOSTIC, d.score, d.bbox, d.mask)
            elif d.category not in categories:
                raise ValidationError(f"category {d.category!r} is not in the dataset; use class_agnostic")
            out.append(d)
        dets[image_id] = out

    report = ApReport(thresholds, kinds, categories)
    for cat in categories:
        positives = sum(1 for g in gts.values() for x in g if x.category == cat)
        per_image = {i: [d for d in dets.get(i, []) if d.category == cat] for i in sorted(image_ids)}
        per_gt = {i: [g for g in gts[i] if g.category == cat] for i in sorted(image_ids)}
        for kind in kinds:
            for t in thresholds:
                pooled = []
                for i in sorted(image_ids):
                    flags = match_detections(per_image[i], per_gt[i], t, kind)
                    pooled += [(-d.score, i, r, f) for r, (d, f) in enumerate(zip(per_image[i], flags))]
                pooled.sort(key=lambda p: p[:3])
                ap = average_precision([p[3] for p in pooled], positives)
                report.per_entry[(cat, t, kind)] = None if ap is None else 100.0 * ap
    return report


def render_table(report: ApReport) -> str:
    """Fixed-width table with one row per kind and one column per IoU threshold."""
    if not report.kinds or not report.thresholds:
        raise ValueError("cannot render a report without kinds and thresholds")
    head = f"{'IoU':<6}" + "".join(f"{t:>8.2f}" for t in report.thresholds)
    lines = [head]
    for kind in report.kinds:
        row = report.map_by_threshold(kind)
        cells = "".join(f"{v:>8.2f}" if v is not None else f"{'-':>8}" for v in row.values())
        lines.append(f"{kind:<6}" + cells)
    for kind, v in report.map_by_kind.items():
        lines.append(f"{kind} mAP: " + (f"{v:.2f}" if v is not None else "-"))
    return "\n".join(lines)
