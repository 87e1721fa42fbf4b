"""Acceptance gate: eleven criteria, each printed as one PASS/FAIL line in the summary.

Run alone with ``pytest tests/test_acceptance.py -v -s``. Criterion 8 trains the
prototype model once per session (a few minutes on one CPU core); criteria 9 and
10 reuse that model.
"""
import time

import numpy as np
import pytest
from scipy import ndimage

from acceptance_log import criterion
from oracles import brute_force_map, gradcheck
from fluoroseg import tensor as T
from fluoroseg.coco import (
    CocoAnnotation,
    CocoDataset,
    CocoImage,
    RleMask,
    dataset_from_samples,
    rle_decode,
    rle_encode,
    split_train_test,
)
from fluoroseg.evaluation import DEFAULT_THRESHOLDS, evaluate, iou
from fluoroseg.geometry import FluoroCamera, mask_bbox, plate_mesh, rasterize_silhouette
from fluoroseg.netpbm import write_pgm
from fluoroseg.segmenters import Detection, ProtoBackend, ProtoModel, ThresholdBackend, TrainConfig, segment, train
from fluoroseg.synth import SceneGeometry, flexion_sweep, generate_dataset
from fluoroseg.video import FrameSource, bench, hardware_info, run_video

pytestmark = pytest.mark.acceptance

TRAIN_ITERATIONS = 2000


def _det(cat, score, mask, bbox=None):
    box = bbox if bbox is not None else tuple(float(v) for v in mask_bbox(mask))
    return Detection(cat, float(score), box, mask)


# ---------------------------------------------------------------- 1


def _random_scene(rng, image_id, h, w):
    """Ground truth and predictions for one small image, with score ties and stray boxes."""
    gts, dets = [], []
    for _ in range(rng.integers(0, 5)):
        m = np.zeros((h, w), bool)
        y, x = rng.integers(0, h - 3), rng.integers(0, w - 3)
        m[y:y + rng.integers(2, 7), x:x + rng.integers(2, 7)] = True
        gts.append((str(rng.choice(["femur", "tibia"])), m))
    for _ in range(rng.integers(0, 7)):
        if gts and rng.random() < 0.7:
            cat, base = gts[rng.integers(len(gts))]
            m = ndimage.shift(base.astype(float), rng.integers(-2, 3, size=2), order=0) > 0.5
            if rng.random() < 0.3:
                cat = "tibia" if cat == "femur" else "femur"
        else:
            m = rng.random((h, w)) < 0.15
            cat = str(rng.choice(["femur", "tibia"]))
        if not m.any():
            m[0, 0] = True
        box = tuple(float(v) for v in mask_bbox(m))
        if rng.random() < 0.3:  # box not derived from the mask
            box = (box[0] + float(rng.integers(-1, 2)), box[1], box[2] + float(rng.integers(0, 3)), box[3])
            box = (max(box[0], 0.0), box[1], min(box[2], w - max(box[0], 0.0)), box[3])
        dets.append(_det(cat, rng.choice([0.3, 0.5, 0.7, 0.9]), m, box))
    return gts, dets


def test_c01_oracle_equivalence():
    with criterion(1, "evaluate() equals brute-force greedy matching + 101-point AP on 100 scenes") as note:
        rng = np.random.default_rng(2024)
        t0 = time.perf_counter()
        worst = 0.0
        entries = 0
        for _ in range(100):
            n_img = int(rng.integers(1, 3))
            h, w = 12, 14
            ds = CocoDataset()
            preds, scenes = {}, {}
            ann_id = 1
            for image_id in range(1, n_img + 1):
                gts, dets = _random_scene(rng, image_id, h, w)
                ds.images.append(CocoImage(image_id, f"{image_id}.pgm", w, h))
                for cat, m in gts:
                    ds.annotations.append(CocoAnnotation.from_mask(ann_id, image_id, 1 if cat == "femur" else 2, m))
                    ann_id += 1
                preds[image_id] = dets
                scenes[image_id] = (
                    [(c, tuple(mask_bbox(m)), m.ravel().tolist()) for c, m in gts],
                    [(d.category, d.score, d.bbox, d.mask.ravel().tolist()) for d in dets],
                )
            report = evaluate(preds, ds)
            oracle = brute_force_map(scenes, report.thresholds)
            for key, got in report.per_entry.items():
                want = oracle.get(key)
                assert (got is None) == (want is None), f"{key}: {got} vs {want}"
                if got is not None:
                    worst = max(worst, abs(got - want))
                    entries += 1
        elapsed = time.perf_counter() - t0
        note.append(f"{entries} AP entries, max |diff| {worst:.2e}, {elapsed:.2f} s")
        assert worst <= 1e-9
        assert elapsed < 10.0


# ---------------------------------------------------------------- 2 and 3


@pytest.fixture(scope="module")
def clean_truth():
    samples = generate_dataset(30, {"clean": 1.0}, seed=303, geometry=SceneGeometry.default(128))
    return dataset_from_samples(samples)


def _truth_as_predictions(ds, transform=lambda m: m):
    names = dict(ds.categories)
    out = {im.id: [] for im in ds.images}
    for a in ds.annotations:
        out[a.image_id].append(_det(names[a.category_id], 1.0, transform(a.mask())))
    return out


def test_c02_perfect_predictor():
    with criterion(2, "ground truth fed back as predictions scores 100.00 at every threshold") as note:
        samples = generate_dataset(30, {"clean": 0.4, "overlap": 0.3, "bilateral": 0.3}, seed=202, geometry=SceneGeometry.default(128))
        ds = dataset_from_samples(samples)
        report = evaluate(_truth_as_predictions(ds), ds)
        values = [v for v in report.per_entry.values() if v is not None]
        note.append(f"{len(values)} entries, {len(ds.annotations)} instances")
        assert report.thresholds == DEFAULT_THRESHOLDS
        assert values and all(v == 100.0 for v in values)
        for kind in ("box", "mask"):
            assert all(v == 100.0 for v in report.map_by_threshold(kind).values())


def test_c03_dilation_degrades_with_threshold(clean_truth):
    with criterion(3, "2-px dilated masks: AP non-increasing in IoU, mask AP(0.95) < AP(0.50)") as note:
        grow = lambda m: ndimage.binary_dilation(m, structure=np.ones((3, 3), bool), iterations=2)
        report = evaluate(_truth_as_predictions(clean_truth, grow), clean_truth)
        for kind in ("box", "mask"):
            row = list(report.map_by_threshold(kind).values())
            note.append(f"{kind} " + " ".join(f"{v:.1f}" for v in row))
            assert all(a >= b for a, b in zip(row, row[1:])), kind
            for cat in report.categories:
                seq = [report.per_entry[(cat, t, kind)] for t in report.thresholds]
                assert all(a >= b for a, b in zip(seq, seq[1:])), (cat, kind)
        mask = report.map_by_threshold("mask")
        assert mask[0.95] < mask[0.5]


# ---------------------------------------------------------------- 4


def _edge_masks():
    out = [np.zeros((5, 7), bool), np.ones((5, 7), bool), np.zeros((0, 0), bool), np.zeros((1, 1), bool), np.ones((1, 1), bool)]
    for r, c in ((0, 0), (0, 6), (4, 0), (4, 6)):
        m = np.zeros((5, 7), bool)
        m[r, c] = True
        out.append(m)
    for n in (1, 2, 9):
        for fill in (0, 1, 2):
            row = np.zeros((1, n), bool)
            col = np.zeros((n, 1), bool)
            if fill == 1:
                row[:] = col[:] = True
            elif fill == 2:
                row[0, ::2] = col[::2, 0] = True
            out += [row, col]
    return out


def test_c04_rle_round_trip():
    with criterion(4, "RLE round trip on 10,000 random masks plus edge masks") as note:
        rng = np.random.default_rng(4)
        failures = 0
        masks = _edge_masks()
        n_edge = len(masks)
        for _ in range(10_000):
            h, w = rng.integers(1, 24, size=2)
            masks.append(rng.random((h, w)) < rng.random())
        for m in masks:
            rle = rle_encode(m)
            back = rle_decode(RleMask.from_json(rle.to_json()))
            if back.shape != m.shape or not np.array_equal(back, m):
                failures += 1
        note.append(f"{len(masks)} masks ({n_edge} edge cases), {failures} failures")
        assert failures == 0


# ---------------------------------------------------------------- 5


def _away_from_zero(rng, shape, gap=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap * 2, x)


def _distinct(rng, shape):
    """Values whose 2x2-window maxima are separated by far more than the FD step."""
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) * 0.1 + rng.uniform(0, 0.01, shape))


GRAD_OPS = {
    "conv2d": lambda rng: _conv_case(rng),
    "relu": lambda rng: (T.relu, [_away_from_zero(rng, (3, 4))]),
    "sigmoid": lambda rng: (T.sigmoid, [rng.normal(0, 3, size=(3, 4))]),
    "maxpool2d": lambda rng: (T.maxpool2d, [_distinct(rng, (1, 2, 4, 6))]),
    "upsample2x": lambda rng: (T.upsample2x, [rng.normal(size=(1, 2, 3, 3))]),
    "add": lambda rng: (T.add, [rng.normal(size=(3, 3)), rng.normal(size=(3, 3))]),
    "mul": lambda rng: (T.mul, [rng.normal(size=(3, 3)), rng.normal(size=(3, 3))]),
    "matmul": lambda rng: (T.matmul, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
    "reshape": lambda rng: (lambda x: T.reshape(x, (6, 2)), [rng.normal(size=(3, 4))]),
    "transpose": lambda rng: (lambda x: T.transpose(x, (1, 0, 2)), [rng.normal(size=(2, 3, 2))]),
    "take": lambda rng: (lambda x: T.take(x, (np.array([0, 2, 2]), slice(1, 3))), [rng.normal(size=(3, 4))]),
    "softmax_ce": lambda rng: _loss_case(rng, "softmax_ce"),
    "bce_with_logits": lambda rng: _loss_case(rng, "bce"),
    "smooth_l1": lambda rng: (
        lambda p: T.smooth_l1(p, np.zeros((4, 4))),
        [np.where(rng.random((4, 4)) < 0.5, rng.uniform(0.05, 0.9, (4, 4)), rng.uniform(1.1, 3, (4, 4))) * rng.choice([-1, 1], (4, 4))],
    ),
}


def _conv_case(rng):
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    arrays = [rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)]
    return (lambda x, k, b: T.conv2d(x, k, b, stride, pad)), arrays


def _loss_case(rng, kind):
    # targets and weights are drawn once so every finite-difference evaluation sees the same loss
    if kind == "softmax_ce":
        z = rng.normal(size=(5, 3))
        target, weight = rng.integers(0, 3, size=5), rng.uniform(0.1, 1, size=5)
        return (lambda x: T.softmax_ce(x, target, weight)), [z]
    z = rng.normal(0, 2, size=(2, 3))
    target, weight = (rng.random((2, 3)) < 0.5).astype(float), rng.uniform(0.1, 1, size=(2, 3))
    return (lambda x: T.bce_with_logits(x, target, weight)), [z]


def test_c05_gradients():
    with criterion(5, "finite-difference gradient checks, 20 instances per op, rel err < 1e-4") as note:
        worst_all = {}
        for name, make in GRAD_OPS.items():
            worst = 0.0
            for i in range(20):
                op, arrays = make(np.random.default_rng(1000 * len(name) + i))
                worst = max(worst, gradcheck(op, arrays, np.random.default_rng(i), eps=1e-5))
            worst_all[name] = worst
        note.append(", ".join(f"{k} {v:.1e}" for k, v in worst_all.items()))
        bad = {k: v for k, v in worst_all.items() if not v < 1e-4}
        assert not bad, bad


# ---------------------------------------------------------------- 6


def _plate_errors(half_px_256: float, depth: float = 800.0, fov: float = 300.0):
    """(area error, perimeter, analytic area) at 256 and 512 px for a centred plate."""
    out = {}
    pitch_256 = fov / 256
    side_mm = 2 * half_px_256 * pitch_256 * depth / 1000.0
    for size in (256, 512):
        cam = FluoroCamera.centered(size, fov)
        side_px = side_mm * cam.source_to_detector / (depth * cam.pixel_pitch)
        analytic = side_px ** 2
        count = int(rasterize_silhouette(plate_mesh(side_mm, depth), cam).sum())
        out[size] = (count - analytic, 4 * side_px, analytic)
    return out


def test_c06_plate_silhouette():
    with criterion(6, "plate silhouette area within +-perimeter at 256, relative error halves at 512") as note:
        for frac in (0.35, 0.4, 0.45, 0.55, 0.6, 0.65):
            half = 40 + frac
            e = _plate_errors(half)
            (err256, per256, a256), (err512, per512, a512) = e[256], e[512]
            note.append(f"f={frac}: {err256 / a256:+.4f} -> {err512 / a512:+.4f}")
            assert abs(err256) <= per256
            assert abs(err512) <= per512
            assert abs(err512) / a512 <= 0.5 * abs(err256) / a256


# ---------------------------------------------------------------- 7


def test_c07_threshold_baseline():
    with criterion(7, "threshold baseline covers every GT part with IoU >= 0.95 on 50 clean images in < 30 s") as note:
        t0 = time.perf_counter()
        samples = generate_dataset(50, {"clean": 1.0}, seed=707, geometry=SceneGeometry.default(256))
        t_gen = time.perf_counter() - t0
        backend = ThresholdBackend()
        worst, parts = 1.0, 0
        for s in samples:
            dets = segment(backend, s.image)
            for p in s.parts:
                best = max((iou("mask", d.mask, p.mask) for d in dets), default=0.0)
                worst = min(worst, best)
                parts += 1
        elapsed = time.perf_counter() - t0
        note.append(f"{parts} parts, min IoU {worst:.4f}, {elapsed:.1f} s (generation {t_gen:.1f} s)")
        assert worst >= 0.95
        assert elapsed < 30.0


# ---------------------------------------------------------------- 8


@pytest.fixture(scope="session")
def trained():
    """Prototype model trained on 200 clean 128 px images; 50 held out."""
    samples = generate_dataset(250, {"clean": 1.0}, seed=11, geometry=SceneGeometry.default(128))
    ds = dataset_from_samples(samples)
    images = {i + 1: s.image for i, s in enumerate(samples)}
    train_ds, test_ds = split_train_test(ds, 0.8, seed=0)
    cfg = TrainConfig(iterations=TRAIN_ITERATIONS, batch_size=4, lr=0.01, momentum=0.9, seed=0)
    t0 = time.perf_counter()
    model, trace = train(ProtoModel.init(cfg.seed), train_ds, images, cfg)
    return {
        "model": model, "trace": trace, "seconds": time.perf_counter() - t0,
        "train": train_ds, "test": test_ds, "images": images,
    }


def test_c08_learning_signal(trained):
    with criterion(8, "proto model, 200 clean 128 px images: held-out class-aware mask mAP@0.50 >= 70") as note:
        assert len(trained["train"].images) == 200 and len(trained["test"].images) == 50
        backend = ProtoBackend(trained["model"])
        preds = {im.id: segment(backend, trained["images"][im.id]) for im in trained["test"].images}
        report = evaluate(preds, trained["test"], thresholds=[0.5], kinds=("mask",))
        m = report.map_by_threshold("mask")[0.5]
        note.append(f"{TRAIN_ITERATIONS} iterations in {trained['seconds']:.0f} s, mask mAP@0.50 {m:.2f}")
        assert TRAIN_ITERATIONS <= 5000
        assert m >= 70.0


def test_trained_loss_halves(trained):
    trace = trained["trace"]
    assert len(trace) == TRAIN_ITERATIONS
    assert np.mean(trace[-100:]) < 0.5 * np.mean(trace[:100])


def test_trained_model_finds_both_parts(trained):
    backend = ProtoBackend(trained["model"])
    test_ds = trained["test"]
    by_image = test_ds.annotations_by_image()
    image_id = test_ds.images[0].id
    dets = segment(backend, trained["images"][image_id])
    names = dict(test_ds.categories)
    for a in by_image[image_id]:
        cat = names[a.category_id]
        assert max((iou("mask", d.mask, a.mask()) for d in dets if d.category == cat), default=0.0) >= 0.5


# ---------------------------------------------------------------- 9


def test_c09_throughput(trained):
    with criterion(9, "single worker at 256 px: threshold >= 20 fps, proto >= 8 fps") as note:
        hw = hardware_info()
        thr = bench(ThresholdBackend(), 256, 100, workers=1)
        proto = bench(ProtoBackend(trained["model"]), 256, 100, workers=1)
        note.append(f"threshold {thr.fps:.1f} fps, proto {proto.fps:.1f} fps on {hw['cpu']} ({hw['logical_cpus']} CPUs)")
        assert thr.fps >= 20.0
        assert proto.fps >= 8.0


# ---------------------------------------------------------------- 10


def test_c10_video_determinism(trained, tmp_path):
    with criterion(10, "100-frame flexion sweep: detections byte-identical for workers 1 and 4") as note:
        frames = tmp_path / "frames"
        frames.mkdir()
        for i, s in enumerate(flexion_sweep(100, size=128, seed=10)):
            write_pgm(frames / f"{i}.pgm", s.image)
        src = FrameSource.open(frames)
        sizes = []
        for name, backend in (("threshold", ThresholdBackend()), ("proto", ProtoBackend(trained["model"]))):
            one = run_video(src, backend, tmp_path / f"{name}1", workers=1)
            four = run_video(src, backend, tmp_path / f"{name}4", workers=4, overlay_frames=True)
            a, b = one.results_path.read_bytes(), four.results_path.read_bytes()
            sizes.append(f"{name} {len(a)} bytes")
            assert one.report.frames == four.report.frames == 100
            assert a == b, name
        note.append(", ".join(sizes))


# ---------------------------------------------------------------- 11


def test_c11_split():
    with criterion(11, "split of 1,000 images is exactly 900/100, disjoint and seed-stable") as note:
        ds = CocoDataset([CocoImage(i, f"{i}.pgm", 8, 8) for i in range(1, 1001)])
        tr, te = split_train_test(ds, 0.9, seed=7)
        tr2, te2 = split_train_test(ds, 0.9, seed=7)
        a, b = {im.id for im in tr.images}, {im.id for im in te.images}
        note.append(f"{len(a)}/{len(b)}")
        assert len(a) == 900 and len(b) == 100
        assert not a & b and a | b == set(range(1, 1001))
        assert [im.id for im in tr2.images] == [im.id for im in tr.images]
        assert [im.id for im in te2.images] == [im.id for im in te.images]
