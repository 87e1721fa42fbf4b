"""COCO instance-segmentation datasets and results with uncompressed RLE masks."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CodecError, ParseError, ValidationError
from .geometry import mask_bbox

DEFAULT_CATEGORIES = ((1, "femur"), (2, "tibia"))
# results-only label for class-agnostic backends; never part of a dataset
IMPLANT_CATEGORY_ID = 3
CATEGORY_IDS = {"femur": 1, "tibia": 2, "implant": IMPLANT_CATEGORY_ID}
CATEGORY_NAMES = {v: k for k, v in CATEGORY_IDS.items()}


@dataclass(frozen=True)
class RleMask:
    size: tuple[int, int]  # (height, width)
    counts: tuple[int, ...]

    def to_json(self) -> dict:
        return {"size": list(self.size), "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj) -> "RleMask":
        try:
            h, w = (int(v) for v in obj["size"])
            counts = obj["counts"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError("segmentation must be {'size': [h, w], 'counts': [...]}") from exc
        if isinstance(counts, str):
            raise ParseError("compressed RLE strings are not supported")
        return cls((h, w), tuple(int(c) for c in counts))


def rle_encode(mask: np.ndarray) -> RleMask:
    """Column-major run lengths, starting with a (possibly empty) run of zeros."""
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    flat = m.ravel(order="F")
    if flat.size == 0:
        return RleMask((h, w), (0,))
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(edges).tolist()
    if flat[0]:
        runs = [0] + runs
    return RleMask((h, w), tuple(runs))


def rle_decode(rle: RleMask) -> np.ndarray:
    h, w = rle.size
    counts = np.asarray(rle.counts, dtype=np.int64)
    if np.any(counts < 0):
        raise CodecError("negative run length")
    if counts.sum() != h * w:
        raise CodecError(f"run lengths sum to {counts.sum()}, expected {h * w}")
    values = np.arange(len(counts)) % 2 == 1
    flat = np.repeat(values, counts)
    return flat.reshape((h, w), order="F")


@dataclass(frozen=True)
class CocoImage:
    id: int
    file_name: str
    width: int
    height: int


@dataclass(frozen=True)
class CocoAnnotation:
    id: int
    image_id: int
    category_id: int
    segmentation: RleMask
    bbox: tuple[int, int, int, int]
    area: int
    iscrowd: int = 0

    @classmethod
    def from_mask(cls, ann_id: int, image_id: int, category_id: int, mask: np.ndarray) -> "CocoAnnotation":
        box = mask_bbox(mask)
        if box is None:
            raise ValidationError("annotations need a non-empty mask")
        return cls(ann_id, image_id, category_id, rle_encode(mask), box, int(np.count_nonzero(mask)))

    def mask(self) -> np.ndarray:
        return rle_decode(self.segmentation)


@dataclass
class CocoDataset:
    images: list[CocoImage] = field(default_factory=list)
    annotations: list[CocoAnnotation] = field(default_factory=list)
    categories: list[tuple[int, str]] = field(default_factory=lambda: list(DEFAULT_CATEGORIES))
    info: dict = field(default_factory=dict)

    def image_by_id(self) -> dict[int, CocoImage]:
        return {im.id: im for im in self.images}

    def annotations_by_image(self) -> dict[int, list[CocoAnnotation]]:
        out: dict[int, list[CocoAnnotation]] = {im.id: [] for im in self.images}
        for a in self.annotations:
            out.setdefault(a.image_id, []).append(a)
        return out

    def validate(self) -> None:
        """Raise ValidationError unless ids are unique, references resolve and area/bbox match the masks."""
        for name, ids in (
            ("image", [im.id for im in self.images]),
            ("annotation", [a.id for a in self.annotations]),
            ("category", [c for c, _ in self.categories]),
        ):
            if len(set(ids)) != len(ids):
                raise ValidationError(f"duplicate {name} ids")
        images = self.image_by_id()
        cats = {c for c, _ in self.categories}
        for a in self.annotations:
            im = images.get(a.image_id)
            if im is None:
                raise ValidationError(f"annotation {a.id} references unknown image {a.image_id}")
            if a.category_id not in cats:
                raise ValidationError(f"annotation {a.id} references unknown category {a.category_id}")
            if a.segmentation.size != (im.height, im.width):
                raise ValidationError(f"annotation {a.id} mask size differs from image {im.id}")
            try:
                m = a.mask()
            except CodecError as exc:
                raise ValidationError(f"annotation {a.id}: {exc}") from exc
            if int(np.count_nonzero(m)) != a.area:
                raise ValidationError(f"annotation {a.id}: area {a.area} != mask popcount {int(np.count_nonzero(m))}")
            if mask_bbox(m) != tuple(a.bbox):
                raise ValidationError(f"annotation {a.id}: bbox {a.bbox} != mask bbox {mask_bbox(m)}")
            if a.iscrowd != 0:
                raise ValidationError(f"annotation {a.id}: crowd annotations are not supported")

    def to_json(self) -> dict:
        return {
            "info": self.info,
            "images": [
                {"id": im.id, "file_name": im.file_name, "width": im.width, "height": im.height} for im in self.images
            ],
            "annotations": [
                {
                    "id": a.id,
                    "image_id": a.image_id,
                    "category_id": a.category_id,
                    "segmentation": a.segmentation.to_json(),
                    "bbox": list(a.bbox),
                    "area": a.area,
                    "iscrowd": a.iscrowd,
                }
                for a in self.annotations
            ],
            "categories": [{"id": c, "name": n} for c, n in self.categories],
        }

    @classmethod
    def from_json(cls, obj) -> "CocoDataset":
        try:
            images = [CocoImage(int(i["id"]), str(i["file_name"]), int(i["width"]), int(i["height"])) for i in obj["images"]]
            anns = [
                CocoAnnotation(
                    int(a["id"]),
                    int(a["image_id"]),
                    int(a["category_id"]),
                    RleMask.from_json(a["segmentation"]),
                    tuple(int(v) for v in a["bbox"]),
                    int(a["area"]),
                    int(a.get("iscrowd", 0)),
                )
                for a in obj["annotations"]
            ]
            cats = [(int(c["id"]), str(c["name"])) for c in obj["categories"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"not a COCO instance dataset: {exc}") from exc
        return cls(images, anns, cats, dict(obj.get("info", {})))


def write_dataset(ds: CocoDataset, path) -> None:
    ds.validate()
    Path(path).write_text(json.dumps(ds.to_json(), separators=(",", ":")))


def read_dataset(path) -> CocoDataset:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed JSON ({exc})") from exc
    ds = CocoDataset.from_json(obj)
    ds.validate()
    return ds


def split_train_test(ds: CocoDataset, train_fraction: float = 0.9, seed: int = 0) -> tuple[CocoDataset, CocoDataset]:
    """Shuffle image ids with ``seed`` and cut at round(train_fraction * n); annotations follow images."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    ids = sorted(im.id for im in ds.images)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(np.floor(train_fraction * len(ids) + 0.5))
    train_ids = {ids[i] for i in order[:n_train]}

    def subset(keep) -> CocoDataset:
        return CocoDataset(
            [im for im in ds.images if keep(im.id)],
            [a for a in ds.annotations if keep(a.image_id)],
            list(ds.categories),
            dict(ds.info),
        )

    return subset(lambda i: i in train_ids), subset(lambda i: i not in train_ids)


def dataset_from_samples(samples, file_names=None, info=None) -> CocoDataset:
    """COCO dataset for synthetic samples; image ids are 1-based sample indices."""
    ds = CocoDataset(info=dict(info or {}))
    ann_id = 1
    for idx, s in enumerate(samples):
        image_id = idx + 1
        h, w = s.image.shape
        name = file_names[idx] if file_names else f"{idx:06d}.pgm"
        ds.images.append(CocoImage(image_id, name, w, h))
        for p in s.parts:
            ds.annotations.append(CocoAnnotation.from_mask(ann_id, image_id, CATEGORY_IDS[p.category], p.mask))
            ann_id += 1
    return ds


# ---------------------------------------------------------------- results


def detections_to_results(per_image) -> list[dict]:
    """COCO results records from ``{image_id: [Detection, ...]}``, in image then list order."""
    out = []
    for image_id in sorted(per_image):
        for det in per_image[image_id]:
            out.append(
                {
                    "image_id": int(image_id),
                    "category_id": CATEGORY_IDS[det.category],
                    "score": float(det.score),
                    "bbox": [float(v) for v in det.bbox],
                    "segmentation": rle_encode(det.mask).to_json(),
                }
            )
    return out


def results_to_detections(records) -> dict[int, list]:
    from .segmenters.common import Detection

    out: dict[int, list] = {}
    try:
        for r in records:
            cat = CATEGORY_NAMES.get(int(r["category_id"]))
            if cat is None:
                raise ValidationError(f"unknown category id {r['category_id']}")
            det = Detection(cat, float(r["score"]), tuple(float(v) for v in r["bbox"]), rle_decode(RleMask.from_json(r["segmentation"])))
            out.setdefault(int(r["image_id"]), []).append(det)
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed results record: {exc}") from exc
    return out


def write_results(per_image, path) -> None:
    Path(path).write_text(json.dumps(detections_to_results(per_image), separators=(",", ":")))


def read_results(path) -> dict[int, list]:
    try:
        records = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(records, list):
        raise ParseError(f"{path}: results must be a JSON list")
    return results_to_detections(records)
