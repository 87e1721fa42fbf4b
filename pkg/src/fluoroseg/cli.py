"""``fluoroseg`` command line: generate, split, train, segment, eval, video, bench.

Every subcommand accepts ``--config FILE`` (a JSON object whose keys mirror the
long flag names) and ``--seed``. Flags given on the command line override the
file. The effective configuration is echoed before anything runs.

Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .coco import dataset_from_samples, read_dataset, read_results, split_train_test, write_dataset, write_results
from .errors import ConfigError, ValidationError
from .evaluation import evaluate, render_table
from .netpbm import read_pgm, write_pgm

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- parsing helpers


def parse_mix(text) -> dict[str, float]:
    """``"clean=0.5,overlap=0.5"`` (or an already-parsed dict) to a class -> fraction map."""
    if isinstance(text, dict):
        items = text.items()
    else:
        items = []
        for part in str(text).split(","):
            if not part.strip():
                continue
            if "=" not in part:
                raise ConfigError(f"mix entry {part!r} is not name=fraction")
            k, v = part.split("=", 1)
            items.append((k.strip(), v))
    try:
        mix = {str(k): float(v) for k, v in items}
    except ValueError as exc:
        raise ConfigError(f"bad mix fraction: {exc}") from exc
    from .synth import _check_mix

    _check_mix(mix)
    return mix


def parse_thresholds(text) -> list[float]:
    """``"0.5:0.05:0.95"`` (inclusive range) or ``"0.5,0.75"``."""
    if isinstance(text, list):
        return [float(t) for t in text]
    text = str(text)
    try:
        if ":" in text:
            lo, step, hi = (float(t) for t in text.split(":"))
            if step <= 0:
                raise ConfigError("threshold step must be positive")
            n = int(round((hi - lo) / step)) + 1
            return [round(lo + i * step, 10) for i in range(n)]
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad thresholds {text!r}") from exc


def load_images(ds, root: Path) -> dict[int, np.ndarray]:
    images = {}
    for im in ds.images:
        img = read_pgm(root / im.file_name)
        if img.shape != (im.height, im.width):
            raise ValidationError(f"{im.file_name}: size {img.shape[::-1]} disagrees with the dataset")
        images[im.id] = img
    return images


def make_backend(args):
    from .segmenters import ProtoBackend, ProtoModel, ThresholdBackend, ThresholdConfig

    if args.backend == "threshold":
        thr = args.threshold if args.threshold == "auto" else int(args.threshold)
        return ThresholdBackend(ThresholdConfig(thr, int(args.min_area), int(args.morph_radius)))
    if args.backend == "proto":
        if not args.ckpt:
            raise UsageError("--ckpt is required for the proto backend")
        if not Path(args.ckpt).is_file():
            raise UsageError(f"checkpoint {args.ckpt} not found")
        return ProtoBackend(ProtoModel.load(args.ckpt), float(args.conf), float(args.nms))
    raise UsageError(f"unknown backend {args.backend!r}")


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


# ---------------------------------------------------------------- subcommands


def cmd_generate(args) -> int:
    from .synth import GENERATOR_NAME, SceneGeometry, generate_dataset

    _require(args, "out")
    mix = parse_mix(args.mix)
    if args.n < 1 or args.size < 8:
        raise ConfigError("--n must be >= 1 and --size >= 8")
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    samples = generate_dataset(args.n, mix, args.seed, SceneGeometry.default(args.size))
    names = [f"images/{i:06d}.pgm" for i in range(len(samples))]
    for name, s in zip(names, samples):
        write_pgm(out / name, s.image)
    manifest = {"generator": GENERATOR_NAME, "seed": args.seed, "n": args.n, "size": args.size, "mix": mix}
    ds = dataset_from_samples(samples, names, info=manifest)
    write_dataset(ds, out / "annotations.json")
    scen = [
        {"file_name": n, "scenario_class": s.scenario_class, "sub_seed": s.seed, "flexion_deg": s.flexion_deg, "scenario": s.scenario.to_json()}
        for n, s in zip(names, samples)
    ]
    (out / "manifest.json").write_text(json.dumps({**manifest, "samples": scen}, indent=1))
    print(f"wrote {len(samples)} images and {len(ds.annotations)} annotations to {out}")
    return EXIT_OK


def cmd_split(args) -> int:
    _require(args, "data")
    src = Path(args.data)
    ds = read_dataset(src)
    out = Path(args.out) if args.out else src.parent
    out.mkdir(parents=True, exist_ok=True)
    train, test = split_train_test(ds, float(args.fraction), args.seed)
    rel = os.path.relpath(src.parent.resolve(), out.resolve())
    for part in (train, test):
        part.images = [replace(im, file_name=os.path.normpath(os.path.join(rel, im.file_name))) for im in part.images]
    write_dataset(train, out / "train.json")
    write_dataset(test, out / "test.json")
    print(f"train {len(train.images)} images, test {len(test.images)} images -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .segmenters import ProtoModel, TrainConfig, train

    _require(args, "data", "out_ckpt")
    data = Path(args.data)
    ds = read_dataset(data)
    cfg = TrainConfig(
        iterations=int(args.iters), batch_size=int(args.batch), lr=float(args.lr), momentum=float(args.momentum),
        seed=int(args.seed), w_class=float(args.w_class), w_box=float(args.w_box), w_mask=float(args.w_mask),
        hflip=not args.no_hflip,
    )
    cfg.validate()
    images = load_images(ds, data.parent)
    model = ProtoModel.init(cfg.seed)
    model, trace = train(model, ds, images, cfg, log_every=int(args.log_every), log=print)
    ckpt = Path(args.out_ckpt)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    model.save(ckpt)
    csv_path = Path(args.loss_csv) if args.loss_csv else ckpt.with_suffix(".loss.csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(trace, start=1):
            w.writerow([i, repr(v)])
    print(f"checkpoint {ckpt}; loss trace {csv_path} ({len(trace)} iterations)")
    return EXIT_OK


def cmd_segment(args) -> int:
    from .segmenters import segment

    if bool(args.image) == bool(args.data):
        raise UsageError("give exactly one of --image or --data")
    _require(args, "out")
    backend = make_backend(args)
    if args.image:
        path = Path(args.image)
        if not path.is_file():
            raise UsageError(f"image {path} not found")
        per_image = {int(args.image_id): segment(backend, read_pgm(path))}
    else:
        data = Path(args.data)
        ds = read_dataset(data)
        per_image = {i: segment(backend, img) for i, img in load_images(ds, data.parent).items()}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_results(per_image, args.out)
    print(f"{sum(len(v) for v in per_image.values())} detections on {len(per_image)} image(s) -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args, "truth", "preds")
    truth = read_dataset(args.truth)
    preds = read_results(args.preds)
    kinds = tuple(k.strip() for k in str(args.kinds).split(",") if k.strip())
    if not set(kinds) <= {"box", "mask"} or not kinds:
        raise ConfigError(f"--kinds must name box and/or mask, got {args.kinds!r}")
    report = evaluate(preds, truth, parse_thresholds(args.thresholds), kinds, bool(args.class_agnostic))
    print(render_table(report))
    out = Path(args.out) if args.out else Path(args.preds).with_suffix(".eval.json")
    report.write_json(out)
    print(f"report -> {out}")
    return EXIT_OK


def cmd_video(args) -> int:
    from .video import FrameSource, run_video, summary_text

    _require(args, "frames", "out")
    if not Path(args.frames).is_dir():
        raise UsageError(f"frame directory {args.frames} not found")
    backend = make_backend(args)
    run = run_video(FrameSource.open(args.frames), backend, args.out, bool(args.overlay), int(args.workers))
    print(summary_text(run.report, backend.name, failed=len(run.errors)))
    for i, err in sorted(run.errors.items()):
        print(f"frame {i} failed: {err}", file=sys.stderr)
    print(f"detections -> {run.results_path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .video import bench, hardware_info, summary_text

    backend = make_backend(args)
    report = bench(backend, int(args.size), int(args.frames), int(args.workers), int(args.seed))
    hw = hardware_info()
    print(summary_text(report, backend.name, hw))
    if args.out:
        doc = {"backend": backend.name, "image_size": int(args.size), **report.to_json(), "hardware": hw}
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(doc, indent=2))
        print(f"report -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _backend_flags(p):
    p.add_argument("--backend", choices=("threshold", "proto"), default="threshold")
    p.add_argument("--ckpt", help="proto checkpoint")
    p.add_argument("--conf", type=float, default=0.5, help="proto confidence threshold")
    p.add_argument("--nms", type=float, default=0.5, help="proto NMS IoU")
    p.add_argument("--threshold", default="auto", help="grey level or 'auto' (Otsu)")
    p.add_argument("--min-area", type=int, default=20)
    p.add_argument("--morph-radius", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with option values; flags override it")
    common.add_argument("--seed", type=int, default=0)

    parser = argparse.ArgumentParser(prog="fluoroseg", description="Synthetic fluoroscopy implant segmentation toolkit.")
    parser.add_argument("--version", action="version", version=f"fluoroseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.subcommands = sub.choices

    p = sub.add_parser("generate", parents=[common], help="render a synthetic COCO dataset")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--out")
    p.add_argument("--mix", default="clean=1.0", help="scenario fractions, e.g. clean=0.5,overlap=0.5")
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("split", parents=[common], help="train/test split of a dataset")
    p.add_argument("--data")
    p.add_argument("--fraction", type=float, default=0.9)
    p.add_argument("--out", help="output directory (default: next to --data)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", parents=[common], help="train the prototype-mask model")
    p.add_argument("--data")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--w-class", type=float, default=1.0)
    p.add_argument("--w-box", type=float, default=1.0)
    p.add_argument("--w-mask", type=float, default=1.0)
    p.add_argument("--no-hflip", action="store_true", help="disable horizontal-flip augmentation")
    p.add_argument("--out-ckpt")
    p.add_argument("--loss-csv", help="default: <out-ckpt>.loss.csv")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", parents=[common], help="segment one image or every image of a dataset")
    _backend_flags(p)
    p.add_argument("--image")
    p.add_argument("--image-id", type=int, default=1)
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", parents=[common], help="mAP table for predictions against ground truth")
    p.add_argument("--truth")
    p.add_argument("--preds")
    p.add_argument("--thresholds", default="0.5:0.05:0.95")
    p.add_argument("--kinds", default="box,mask")
    p.add_argument("--class-agnostic", action="store_true")
    p.add_argument("--out", help="JSON report (default: <preds>.eval.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("video", parents=[common], help="segment a directory of numbered PGM frames")
    _backend_flags(p)
    p.add_argument("--frames")
    p.add_argument("--out")
    p.add_argument("--overlay", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_video)

    p = sub.add_parser("bench", parents=[common], help="throughput on in-memory synthetic frames")
    _backend_flags(p)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_bench)
    return parser


def parse_args(argv) -> argparse.Namespace:
    """Parse ``argv``; values from ``--config`` become defaults that flags override."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    sub = parser.subcommands[args.command]
    known = {a.dest for a in sub._actions}
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    unknown = sorted(set(cfg) - known - {"command"})
    if unknown:
        raise UsageError(f"unknown config keys for {args.command}: {unknown}")
    cfg.pop("command", None)
    cfg.pop("config", None)
    sub.set_defaults(**cfg)
    return parser.parse_args(argv)


def effective_config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors and --help/--version
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"fluoroseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print("effective config: " + json.dumps(effective_config(args), sort_keys=True), flush=True)
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError, ValueError) as exc:
        # FluoroSegError validation types are ValueErrors
        print(f"fluoroseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"fluoroseg: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
