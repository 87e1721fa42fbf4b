"""Segment numbered PGM frame sequences, draw overlays and measure throughput."""
from __future__ import annotations

import hashlib
import json
import os
import platform
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .coco import detections_to_results
from .errors import ConfigError, ParseError, RunError, ShapeError, ValidationError
from .netpbm import read_header, read_pgm, write_ppm
from .segmenters.common import Detection, segment

REFERENCE_FPS = 20.0  # real-time target rate (GPU class hardware)
CLINICAL_FPS = 8.0  # typical fluoroscope frame rate
WARMUP_FRAMES = 5

# overlay tints; "implant" is the class-agnostic threshold output
TINTS = {
    "femur": (255, 0, 0),
    "tibia": (0, 0, 255),
    "implant": (0, 255, 0),
}
OPACITY = 0.5

_STEM_NUMBER = re.compile(r"(\d+)$")


@dataclass(frozen=True)
class FrameSource:
    directory: Path
    frames: tuple[Path, ...]
    size: tuple[int, int] | None  # (width, height); None if no header was readable

    @classmethod
    def open(cls, directory) -> "FrameSource":
        """Collect ``*.pgm`` files ordered by the number at the end of their stem."""
        directory = Path(directory)
        if not directory.is_dir():
            raise ValidationError(f"{directory} is not a directory")
        keyed = []
        for p in directory.iterdir():
            if p.suffix.lower() != ".pgm":
                continue
            m = _STEM_NUMBER.search(p.stem)
            if m is None:
                raise ValidationError(f"frame {p.name} has no frame number in its name")
            keyed.append((int(m.group(1)), p.name, p))
        if not keyed:
            raise ValidationError(f"no .pgm frames in {directory}")
        keyed.sort()
        frames = tuple(p for _, _, p in keyed)
        sizes = set()
        for p in frames:
            try:
                magic, w, h = read_header(p)
            except (OSError, ParseError):
                continue  # reported per frame when the run reaches it
            if magic == "P5":
                sizes.add((w, h))
        if len(sizes) > 1:
            raise ShapeError(f"frames differ in size: {sorted(sizes)}")
        return cls(directory, frames, sizes.pop() if sizes else None)

    def __len__(self) -> int:
        return len(self.frames)

    def read(self, index: int) -> np.ndarray:
        img = read_pgm(self.frames[index])
        if self.size is not None and (img.shape[1], img.shape[0]) != self.size:
            raise ShapeError(f"{self.frames[index].name}: size {img.shape[::-1]} != {self.size}")
        return img


@dataclass
class ThroughputReport:
    frames: int
    wall_seconds: float
    fps: float
    p50_ms: float
    p95_ms: float
    workers: int = 1
    latencies_ms: list[float] = field(default_factory=list, repr=False)
    digest: str = ""  # sha256 of the detections output, for determinism checks

    @classmethod
    def from_timings(cls, latencies: list[float], wall: float, workers: int, digest: str = "") -> "ThroughputReport":
        ms = [t * 1000.0 for t in latencies]
        n = len(ms)
        p50, p95 = (float(np.percentile(ms, 50)), float(np.percentile(ms, 95))) if n else (0.0, 0.0)
        return cls(n, wall, n / wall if wall > 0 else 0.0, p50, p95, workers, ms, digest)

    def to_json(self) -> dict:
        out = asdict(self)
        out.pop("latencies_ms")
        return out


def hardware_info() -> dict:
    cpu = platform.processor() or platform.machine()
    try:
        for line in Path("/proc/cpuinfo").read_text().splitlines():
            if line.startswith("model name"):
                cpu = line.split(":", 1)[1].strip()
                break
    except OSError:
        pass
    return {
        "cpu": cpu,
        "logical_cpus": os.cpu_count(),
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def summary_text(report: ThroughputReport, backend_name: str, hardware: dict | None = None, failed: int = 0) -> str:
    hw = hardware or hardware_info()
    lines = [
        f"backend: {backend_name}  workers: {report.workers}",
        f"frames: {report.frames}  failed: {failed}  wall: {report.wall_seconds:.3f} s",
        f"throughput: {report.fps:.2f} fps  latency p50 {report.p50_ms:.2f} ms  p95 {report.p95_ms:.2f} ms",
        f"hardware: {hw['cpu']} ({hw['logical_cpus']} logical CPUs), {hw['platform']}",
        f"reference: {REFERENCE_FPS:.0f} fps real-time target (GPU class hardware); measured/reference = {report.fps / REFERENCE_FPS:.2f}",
        f"clinical floor: {CLINICAL_FPS:.0f} fps -> {'met' if report.fps >= CLINICAL_FPS else 'not met'}",
    ]
    return "\n".join(lines)


def overlay(image: np.ndarray, dets: list[Detection]) -> np.ndarray:
    """RGB copy of ``image`` with each detection mask blended in its category colour."""
    rgb = np.repeat(np.asarray(image, dtype=np.float64)[..., None], 3, axis=2)
    # lowest score first so stronger detections end up on top
    for d in sorted(dets, key=lambda d: d.score):
        tint = np.array(TINTS[d.category], dtype=np.float64)
        rgb[d.mask] = (1.0 - OPACITY) * rgb[d.mask] + OPACITY * tint
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def _timed_map(fn, items, workers: int):
    """Ordered ``[(result, error, seconds)]`` plus the wall time of the whole map."""

    def one(item):
        t0 = time.perf_counter()
        try:
            res, err = fn(item), None
        except Exception as exc:  # recorded per frame; the run goes on
            res, err = None, f"{type(exc).__name__}: {exc}"
        return res, err, time.perf_counter() - t0

    t0 = time.perf_counter()
    if workers == 1:
        out = [one(i) for i in items]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(one, items))
    return out, time.perf_counter() - t0


def _results_bytes(per_frame: dict[int, list[Detection]]) -> bytes:
    return json.dumps(detections_to_results(per_frame), separators=(",", ":")).encode()


@dataclass
class VideoRun:
    results_path: Path
    report: ThroughputReport
    errors: dict[int, str]


def run_video(src: FrameSource, backend, out_dir, overlay_frames: bool = False, workers: int = 1) -> VideoRun:
    """Segment every frame once; results are keyed by frame index and written in frame order."""
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    outcomes, wall = _timed_map(lambda i: segment(backend, src.read(i)), range(len(src)), workers)
    per_frame = {i: r for i, (r, err, _) in enumerate(outcomes) if err is None}
    errors = {i: err for i, (_, err, _) in enumerate(outcomes) if err is not None}
    if not per_frame:
        raise RunError(f"all {len(src)} frames failed; first error: {errors[0]}")

    payload = _results_bytes(per_frame)
    results_path = out_dir / "detections.json"
    results_path.write_bytes(payload)
    report = ThroughputReport.from_timings(
        [t for _, err, t in outcomes if err is None], wall, workers, hashlib.sha256(payload).hexdigest()
    )

    # overlays are drawn after timing so they never count toward throughput
    if overlay_frames:
        odir = out_dir / "overlays"
        odir.mkdir(exist_ok=True)
        for i, dets in per_frame.items():
            write_ppm(odir / f"{src.frames[i].stem}.ppm", overlay(src.read(i), dets))

    name = getattr(backend, "name", type(backend).__name__)
    hw = hardware_info()
    doc = {
        "backend": name,
        "source": str(src.directory),
        "frames_total": len(src),
        "throughput": report.to_json(),
        "errors": {str(i): e for i, e in errors.items()},
        "frame_files": [p.name for p in src.frames],
        "hardware": hw,
        "reference_fps": REFERENCE_FPS,
    }
    (out_dir / "report.json").write_text(json.dumps(doc, indent=2))
    (out_dir / "summary.txt").write_text(summary_text(report, name, hw, len(errors)) + "\n")
    return VideoRun(results_path, report, errors)


def bench(backend, image_size: int = 256, n_frames: int = 100, workers: int = 1, seed: int = 0) -> ThroughputReport:
    """Throughput on an in-memory flexion sweep; the first frames are run once untimed as warm-up."""
    from .synth import flexion_sweep

    if n_frames < 10:
        raise ConfigError("bench needs at least 10 frames")
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    frames = [s.image for s in flexion_sweep(n_frames, image_size, seed)]
    for img in frames[:WARMUP_FRAMES]:
        segment(backend, img)
    outcomes, wall = _timed_map(lambda i: segment(backend, frames[i]), range(n_frames), workers)
    for _, err, _ in outcomes:
        if err is not None:
            raise RunError(f"bench frame failed: {err}")
    payload = _results_bytes({i: r for i, (r, _, _) in enumerate(outcomes)})
    return ThroughputReport.from_timings([t for _, _, t in outcomes], wall, workers, hashlib.sha256(payload).hexdigest())
