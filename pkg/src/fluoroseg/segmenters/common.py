from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractError

DETECTION_CATEGORIES = ("femur", "tibia", "implant")


@dataclass
class Detection:
    category: str
    score: float
    bbox: tuple[float, float, float, float]  # x, y, w, h in pixels
    mask: np.ndarray  # bool (H, W)

    def check(self, image_shape: tuple[int, int]) -> None:
        """Raise ContractError unless the detection is consistent with an image of ``image_shape``."""
        h, w = image_shape
        if self.category not in DETECTION_CATEGORIES:
            raise ContractError(f"unknown category {self.category!r}")
        if not 0.0 <= self.score <= 1.0:
            raise ContractError(f"score {self.score} outside [0, 1]")
        if self.mask.shape != (h, w):
            raise ContractError(f"mask shape {self.mask.shape} != image {(h, w)}")
        x, y, bw, bh = self.bbox
        if x < 0 or y < 0 or bw < 0 or bh < 0 or x + bw > w + 1e-9 or y + bh > h + 1e-9:
            raise ContractError(f"bbox {self.bbox} outside the image")
        rows, cols = np.nonzero(self.mask)
        if rows.size and (
            cols.min() < np.floor(x) - 1 or cols.max() + 1 > np.ceil(x + bw) + 1
            or rows.min() < np.floor(y) - 1 or rows.max() + 1 > np.ceil(y + bh) + 1
        ):
            raise ContractError("mask pixels outside the bbox dilated by one pixel")


def box_iou(a, b) -> float:
    """IoU of two (x, y, w, h) boxes; 0 when both are empty."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def nms(dets: list[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy per-category suppression by box IoU; keeps the highest score of each cluster."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    kept: list[Detection] = []
    for i in order:
        d = dets[i]
        if all(k.category != d.category or box_iou(k.bbox, d.bbox) <= iou_thresh for k in kept):
            kept.append(d)
    return kept


def segment(backend, image: np.ndarray) -> list[Detection]:
    """Run any backend and return its detections sorted by descending score (stable)."""
    img = np.asarray(image)
    dets = sorted(backend.segment(img), key=lambda d: -d.score)
    for d in dets:
        d.check(img.shape)
    return dets
