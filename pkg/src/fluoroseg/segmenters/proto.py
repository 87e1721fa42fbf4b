"""Desk-scale prototype-mask instance segmenter.

A small convolutional backbone feeds two branches. The prediction head emits,
for every cell of the stride-8 feature grid, class logits (background, femur,
tibia), four box offsets relative to the cell's square anchor and ``k`` mask
coefficients. The protonet emits ``k`` prototype maps at quarter resolution.
An instance mask is ``sigmoid(coefficients . prototypes)``, upsampled to the
image, cropped to the decoded box and thresholded.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..coco import CATEGORY_NAMES, CocoDataset
from ..errors import ConfigError, ShapeError
from ..tensor import Tensor
from .common import Detection, nms

NUM_CLASSES = 3  # background, femur, tibia
NUM_PROTOS = 8
STRIDE = 8
ANCHOR_SIZE = 4 * STRIDE
MAX_LOG_SCALE = float(np.log(1024 / ANCHOR_SIZE))
HEAD_OUT = NUM_CLASSES + 4 + NUM_PROTOS

# name -> (out, in, k); biases share the name with a ".b" suffix
LAYERS = {
    "stage1": (16, 1, 3),
    "stage2": (32, 16, 3),
    "stage3": (64, 32, 3),
    "stage3b": (64, 64, 3),
    "head": (64, 64, 3),
    "pred": (HEAD_OUT, 64, 1),
    "proto": (32, 32, 3),
    "lateral": (32, 64, 1),
    "proto_out": (NUM_PROTOS, 32, 1),
}


def normalize(images: np.ndarray) -> np.ndarray:
    return (np.asarray(images, dtype=np.float64) - 128.0) / 64.0


class ProtoModel:
    def __init__(self, params: dict[str, np.ndarray]):
        missing = {n for n in LAYERS} | {n + ".b" for n in LAYERS}
        missing -= set(params)
        if missing:
            raise ShapeError(f"missing parameters {sorted(missing)}")
        self.params = {}
        for name, (out, inp, k) in LAYERS.items():
            w = np.array(params[name], dtype=np.float64)
            b = np.array(params[name + ".b"], dtype=np.float64)
            if w.shape != (out, inp, k, k) or b.shape != (out,):
                raise ShapeError(f"{name}: got {w.shape}/{b.shape}, expected {(out, inp, k, k)}/{(out,)}")
            self.params[name] = Tensor(w, requires_grad=True)
            self.params[name + ".b"] = Tensor(b, requires_grad=True)

    @classmethod
    def init(cls, seed: int = 0) -> "ProtoModel":
        """He-normal convolutions; the class bias starts with a 1% foreground prior."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, (out, inp, k) in LAYERS.items():
            std = np.sqrt(2.0 / (inp * k * k)) if name != "pred" else 0.01
            params[name] = rng.normal(0.0, std, size=(out, inp, k, k))
            params[name + ".b"] = np.zeros(out)
        params["pred.b"][0] = np.log(99.0 * (NUM_CLASSES - 1))
        return cls(params)

    @classmethod
    def zeros(cls) -> "ProtoModel":
        params = {}
        for name, (out, inp, k) in LAYERS.items():
            params[name] = np.zeros((out, inp, k, k))
            params[name + ".b"] = np.zeros(out)
        return cls(params)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def save(self, path) -> None:
        T.save_checkpoint(path, self.params)

    @classmethod
    def load(cls, path) -> "ProtoModel":
        return cls(T.load_checkpoint(path))

    def forward(self, images: np.ndarray, train: bool = False) -> tuple[Tensor, Tensor]:
        """Head map [N, 15, H/8, W/8] and prototypes [N, k, H/4, W/4] for a uint8 batch [N, H, W]."""
        imgs = np.asarray(images)
        if imgs.ndim == 2:
            imgs = imgs[None]
        n, h, w = imgs.shape
        if h % STRIDE or w % STRIDE:
            raise ShapeError(f"image size {w}x{h} is not divisible by {STRIDE}")
        p = self.params if train else {k: Tensor(v.data) for k, v in self.params.items()}

        def conv(x, name, pad):
            return T.conv2d(x, p[name], p[name + ".b"], 1, pad)

        x = Tensor(normalize(imgs)[:, None])
        f2 = T.maxpool2d(T.relu(conv(x, "stage1", 1)))
        f4 = T.maxpool2d(T.relu(conv(f2, "stage2", 1)))
        f8 = T.maxpool2d(T.relu(conv(f4, "stage3", 1)))
        f8 = T.relu(conv(f8, "stage3b", 1))
        head = conv(T.relu(conv(f8, "head", 1)), "pred", 0)
        merged = T.relu(conv(f4, "proto", 1) + T.upsample2x(conv(f8, "lateral", 0)))
        protos = conv(merged, "proto_out", 0)
        return head, protos


@dataclass
class RawHeads:
    logits: np.ndarray  # [cells, 3]
    boxes: np.ndarray  # [cells, 4]
    coeffs: np.ndarray  # [cells, k]
    prototypes: np.ndarray  # [k, H/4, W/4]
    image_size: tuple[int, int]  # (H, W)


def _split_head(head: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cells = head.reshape(HEAD_OUT, -1).T
    return cells[:, :NUM_CLASSES], cells[:, NUM_CLASSES:NUM_CLASSES + 4], cells[:, NUM_CLASSES + 4:]


def protonet_forward(model: ProtoModel, image: np.ndarray) -> RawHeads:
    img = np.asarray(image)
    head, protos = model.forward(img[None])
    logits, boxes, coeffs = _split_head(head.data[0])
    return RawHeads(logits.copy(), boxes.copy(), coeffs.copy(), protos.data[0].copy(), img.shape)


def anchor_centers(h: int, w: int) -> np.ndarray:
    """(cx, cy) of every stride-8 cell, row-major."""
    gy, gx = np.mgrid[0:h // STRIDE, 0:w // STRIDE]
    return np.stack([(gx.ravel() + 0.5) * STRIDE, (gy.ravel() + 0.5) * STRIDE], axis=1)


def encode_box(box, anchor) -> np.ndarray:
    x, y, bw, bh = box
    return np.array([
        (x + bw / 2 - anchor[0]) / ANCHOR_SIZE,
        (y + bh / 2 - anchor[1]) / ANCHOR_SIZE,
        np.log(max(bw, 1e-3) / ANCHOR_SIZE),
        np.log(max(bh, 1e-3) / ANCHOR_SIZE),
    ])


def decode_boxes(offsets: np.ndarray, anchors: np.ndarray, h: int, w: int) -> np.ndarray:
    """Corner boxes (x0, y0, x1, y1) clamped to the image."""
    cx = anchors[:, 0] + offsets[:, 0] * ANCHOR_SIZE
    cy = anchors[:, 1] + offsets[:, 1] * ANCHOR_SIZE
    bw = ANCHOR_SIZE * np.exp(np.clip(offsets[:, 2], -MAX_LOG_SCALE, MAX_LOG_SCALE))
    bh = ANCHOR_SIZE * np.exp(np.clip(offsets[:, 3], -MAX_LOG_SCALE, MAX_LOG_SCALE))
    out = np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=1)
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0, w)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0, h)
    return out


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def assemble_detections(raw: RawHeads, conf_thresh: float = 0.5, nms_iou: float = 0.5) -> list[Detection]:
    h, w = raw.image_size
    probs = softmax(raw.logits)
    fg = probs[:, 1:]
    cls = fg.argmax(axis=1)
    score = fg[np.arange(len(fg)), cls]
    cand = np.flatnonzero(score >= conf_thresh)
    if cand.size == 0:
        return []
    boxes = decode_boxes(raw.boxes[cand], anchor_centers(h, w)[cand], h, w)
    pre = [
        (Detection(CATEGORY_NAMES[int(cls[c]) + 1], float(score[c]), (b[0], b[1], b[2] - b[0], b[3] - b[1]), None), c, b)
        for c, b in zip(cand, boxes)
    ]
    kept = nms([d for d, _, _ in pre], nms_iou)
    keep_ids = {id(d) for d in kept}
    k, ph, pw = raw.prototypes.shape
    scale_y, scale_x = h // ph, w // pw
    protos = raw.prototypes.reshape(k, -1)
    cols = np.arange(w) + 0.5
    rows = np.arange(h) + 0.5
    out = []
    for det, c, (x0, y0, x1, y1) in pre:
        if id(det) not in keep_ids:
            continue
        logit = (raw.coeffs[c] @ protos).reshape(ph, pw)
        # strict > 0.5 on the sigmoid is the same as logit > 0
        low = logit > 0
        mask = np.repeat(np.repeat(low, scale_y, axis=0), scale_x, axis=1)
        inside = ((rows >= y0) & (rows <= y1))[:, None] & ((cols >= x0) & (cols <= x1))[None, :]
        det.mask = mask & inside
        det.bbox = tuple(float(v) for v in det.bbox)
        out.append(det)
    out.sort(key=lambda d: -d.score)
    return out


class ProtoBackend:
    name = "proto"

    def __init__(self, model: ProtoModel, conf_thresh: float = 0.5, nms_iou: float = 0.5):
        self.model = model
        self.conf_thresh = conf_thresh
        self.nms_iou = nms_iou

    def segment(self, image: np.ndarray) -> list[Detection]:
        return assemble_detections(protonet_forward(self.model, image), self.conf_thresh, self.nms_iou)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    w_class: float = 1.0
    w_box: float = 1.0
    w_mask: float = 1.0
    neg_pos_ratio: float = 3.0
    hflip: bool = True

    def validate(self) -> None:
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ConfigError("lr must be positive and momentum in [0, 1)")
        if min(self.w_class, self.w_box, self.w_mask) <= 0:
            raise ConfigError("loss weights must be positive")


@dataclass
class _Target:
    classes: np.ndarray  # [cells] int
    owners: list[tuple[int, np.ndarray, tuple[int, int, int, int], np.ndarray]] = field(default_factory=list)
    # (cell, box offsets, gt box, gt mask) per owned instance


def build_targets(anns, h: int, w: int) -> _Target:
    """The cell containing a GT box centre owns that instance; a later instance wins a shared cell."""
    gw = w // STRIDE
    anchors = anchor_centers(h, w)
    classes = np.zeros((h // STRIDE) * gw, dtype=np.int64)
    owned: dict[int, tuple] = {}
    for cat, box, mask in anns:
        x, y, bw, bh = box
        cx = min(int((x + bw / 2) // STRIDE), gw - 1)
        cy = min(int((y + bh / 2) // STRIDE), h // STRIDE - 1)
        cell = cy * gw + cx
        classes[cell] = cat
        owned[cell] = (cell, encode_box(box, anchors[cell]), box, mask)
    return _Target(classes, list(owned.values()))


def _flip_annotations(anns, w: int):
    out = []
    for cat, (x, y, bw, bh), mask in anns:
        out.append((cat, (w - x - bw, y, bw, bh), mask[:, ::-1]))
    return out


def batch_loss(model: ProtoModel, images: np.ndarray, targets: list[_Target], cfg: TrainConfig) -> Tensor:
    n, h, w = images.shape
    head, protos = model.forward(images, train=True)
    cells = (h // STRIDE) * (w // STRIDE)
    flat = T.reshape(T.transpose(T.reshape(head, (n, HEAD_OUT, cells)), (0, 2, 1)), (n * cells, HEAD_OUT))

    cls_target = np.concatenate([t.classes for t in targets])
    pos = cls_target > 0
    n_pos = max(int(pos.sum()), 1)
    weight = np.where(pos, 1.0 / n_pos, cfg.neg_pos_ratio / max(int((~pos).sum()), 1))
    logits = T.take(flat, (slice(None), slice(0, NUM_CLASSES)))
    total = T.softmax_ce(logits, cls_target, weight) * cfg.w_class

    rows, offsets, mask_terms = [], [], []
    for i, t in enumerate(targets):
        for cell, off, _, _ in t.owners:
            rows.append(i * cells + cell)
            offsets.append(off)
    if rows:
        idx = np.array(rows)
        boxes = T.take(flat, (idx, slice(NUM_CLASSES, NUM_CLASSES + 4)))
        total = total + T.smooth_l1(boxes, np.array(offsets)) * cfg.w_box

        k = NUM_PROTOS
        ph, pw = h // 4, w // 4
        n_inst = len(rows)
        for i, t in enumerate(targets):
            if not t.owners:
                continue
            owned = np.array([i * cells + cell for cell, *_ in t.owners])
            coef = T.take(flat, (owned, slice(NUM_CLASSES + 4, HEAD_OUT)))
            proto_i = T.reshape(T.take(protos, i), (k, ph * pw))
            low = T.reshape(T.matmul(coef, proto_i), (len(owned), 1, ph, pw))
            full = T.upsample2x(T.upsample2x(low))
            tgt = np.zeros(full.shape)
            wgt = np.zeros(full.shape)
            for j, (_, _, (x, y, bw, bh), m) in enumerate(t.owners):
                tgt[j, 0] = m
                # equal total weight per instance, spread over its GT box
                wgt[j, 0, y:y + bh, x:x + bw] = 1.0 / (bw * bh)
            term = T.bce_with_logits(full, tgt, wgt) * (len(owned) / n_inst)
            mask_terms.append(term)
        mask_loss = mask_terms[0]
        for term in mask_terms[1:]:
            mask_loss = mask_loss + term
        total = total + mask_loss * cfg.w_mask
    return total


def train(model: ProtoModel, ds: CocoDataset, images, cfg: TrainConfig, log_every: int = 0, log=print) -> tuple[ProtoModel, list[float]]:
    """Plain SGD over random mini-batches; returns the model and the per-iteration loss trace."""
    cfg.validate()
    if not ds.images:
        raise ConfigError("cannot train on an empty dataset")
    if not ds.annotations:
        raise ConfigError("training needs at least one annotation")
    by_image = ds.annotations_by_image()
    ids = [im.id for im in ds.images]
    sizes = {(im.height, im.width) for im in ds.images}
    if len(sizes) != 1:
        raise ShapeError("all training images must share one size")
    h, w = sizes.pop()
    if h % STRIDE or w % STRIDE:
        raise ShapeError(f"image size {w}x{h} is not divisible by {STRIDE}")

    anns = {i: [(a.category_id, tuple(a.bbox), a.mask()) for a in by_image[i]] for i in ids}
    targets = {i: build_targets(anns[i], h, w) for i in ids}
    flipped = {i: build_targets(_flip_annotations(anns[i], w), h, w) for i in ids} if cfg.hflip else {}

    rng = np.random.default_rng(cfg.seed)
    opt = T.SGD(model.parameters(), cfg.lr, cfg.momentum)
    trace: list[float] = []
    queue: list[int] = []
    for it in range(cfg.iterations):
        batch = []
        while len(batch) < cfg.batch_size:
            if not queue:
                queue = list(rng.permutation(len(ids)))
            batch.append(ids[queue.pop()])
        flips = rng.random(len(batch)) < 0.5 if cfg.hflip else np.zeros(len(batch), bool)
        imgs = np.stack([np.asarray(images[i])[:, ::-1] if f else np.asarray(images[i]) for i, f in zip(batch, flips)])
        tg = [flipped[i] if f else targets[i] for i, f in zip(batch, flips)]
        loss = batch_loss(model, imgs, tg, cfg)
        loss.backward()
        opt.step()
        trace.append(float(loss.data))
        if log_every and (it + 1) % log_every == 0:
            log(f"iter {it + 1}/{cfg.iterations} loss {np.mean(trace[-log_every:]):.4f}")
    return model, trace
