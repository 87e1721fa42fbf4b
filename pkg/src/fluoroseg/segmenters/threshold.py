"""Intensity-threshold baseline: metal implants are the darkest pixels in the frame."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..geometry import mask_bbox
from .common import Detection


def otsu_threshold(image: np.ndarray) -> int:
    """Otsu's threshold ``t``: pixels ``< t`` form the dark class."""
    hist = np.bincount(np.asarray(image, dtype=np.uint8).ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    levels = np.arange(256)
    w0 = np.cumsum(hist)  # weight of the class [0, k]
    w1 = total - w0
    s0 = np.cumsum(hist * levels)
    mu0 = np.divide(s0, w0, out=np.zeros(256), where=w0 > 0)
    mu1 = np.divide(s0[-1] - s0, w1, out=np.zeros(256), where=w1 > 0)
    between = w0 * w1 * (mu0 - mu1) ** 2
    between[(w0 == 0) | (w1 == 0)] = -1.0
    if between.max() < 0:
        return 0  # single-valued image: nothing is "darker"
    k = np.flatnonzero(between == between.max())
    # centre of the plateau, so a two-level histogram splits halfway between the modes
    return int((k[0] + k[-1]) // 2) + 1


@dataclass
class ThresholdConfig:
    threshold: int | str = "auto"
    min_area: int = 20
    morph_radius: int = 1


def _square(radius: int) -> np.ndarray:
    return np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)


def threshold_segment(image: np.ndarray, cfg: ThresholdConfig | None = None) -> list[Detection]:
    """One class-agnostic "implant" detection per dark connected component."""
    cfg = cfg or ThresholdConfig()
    img = np.asarray(image)
    t = otsu_threshold(img) if cfg.threshold == "auto" else int(cfg.threshold)
    binary = img < t
    r = int(cfg.morph_radius)
    if r > 0:
        # pad so components touching the frame are not eaten by the border
        padded = np.pad(binary, r + 1, mode="edge")
        padded = ndimage.binary_opening(padded, _square(r))
        padded = ndimage.binary_closing(padded, _square(r))
        binary = padded[r + 1:-(r + 1), r + 1:-(r + 1)]
    labels, n = ndimage.label(binary)  # default structure is 4-connected
    if n == 0:
        return []
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    dets = []
    for lab in range(1, n + 1):
        if areas[lab] < cfg.min_area:
            continue
        m = labels == lab
        dets.append(Detection("implant", 1.0, tuple(float(v) for v in mask_bbox(m)), m))
    return dets


class ThresholdBackend:
    name = "threshold"

    def __init__(self, cfg: ThresholdConfig | None = None):
        self.cfg = cfg or ThresholdConfig()

    def segment(self, image: np.ndarray) -> list[Detection]:
        return threshold_segment(image, self.cfg)
