"""Synthetic fluoroscopy frames with femur/tibia ground truth.

A knee is two procedural implant meshes posed by a flexion angle and rendered
as dark silhouettes over a textured background. Scenario classes reproduce the
typical failure modes of clinical frames: motion blur, parts leaving the
field, overlapping components, a second implanted knee and an inset
sub-screen. Ground-truth masks are always the undegraded silhouettes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np
from scipy import ndimage

from . import __version__
from .errors import ConfigError, ShapeError
from .geometry import (
    FluoroCamera,
    RigidPose,
    TriMesh,
    box_mesh,
    extrude_polygon_strip,
    mask_bbox,
    merge_meshes,
    pose_mesh,
    rasterize_silhouette,
    rotation_about,
)

CATEGORIES = ("femur", "tibia")

BACKGROUND_LEVEL = 150.0
IMPLANT_LEVEL = 40.0
TEXTURE_SPAN = 70.0
SUBSCREEN_LEVEL = 230

SCENARIO_CLASSES = ("clean", "blur", "crop", "overlap", "bilateral", "subscreen", "combo")


@dataclass(frozen=True)
class ScenarioSpec:
    blur_sigma: float = 0.0
    crop_shift: tuple[float, float] = (0.0, 0.0)
    overlap_shift: tuple[float, float] = (0.0, 0.0)
    bilateral: bool = False
    subscreen: tuple[int, int, int, int] | None = None  # x, y, w, h
    subscreen_level: int = SUBSCREEN_LEVEL
    noise_amp: float = 0.0
    field_radius: float = math.inf

    def validate(self, width: int, height: int) -> None:
        if self.blur_sigma < 0 or self.blur_sigma > min(width, height) / 4:
            raise ConfigError(f"blur_sigma {self.blur_sigma} outside [0, {min(width, height) / 4}]")
        if not 0.0 <= self.noise_amp <= 1.0:
            raise ConfigError("noise_amp must lie in [0, 1]")
        if self.field_radius <= 0:
            raise ConfigError("field_radius must be positive")
        if self.subscreen is not None:
            x, y, w, h = self.subscreen
            if x < 0 or y < 0 or w <= 0 or h <= 0 or x + w > width or y + h > height:
                raise ConfigError("subscreen rectangle must lie inside the image")

    def to_json(self) -> dict:
        return {
            "blur_sigma": self.blur_sigma,
            "crop_shift": list(self.crop_shift),
            "overlap_shift": list(self.overlap_shift),
            "bilateral": self.bilateral,
            "subscreen": list(self.subscreen) if self.subscreen else None,
            "noise_amp": self.noise_amp,
            "field_radius": None if math.isinf(self.field_radius) else self.field_radius,
        }


@dataclass
class Part:
    category: str
    mask: np.ndarray
    bbox: tuple[int, int, int, int]


@dataclass
class SynthSample:
    image: np.ndarray  # uint8 (H, W)
    parts: list[Part]
    scenario: ScenarioSpec
    seed: int
    scenario_class: str = "clean"
    flexion_deg: float = 0.0

    def check(self) -> None:
        counts = {c: 0 for c in CATEGORIES}
        for p in self.parts:
            if p.mask.shape != self.image.shape:
                raise ShapeError("part mask does not match image size")
            if p.bbox != mask_bbox(p.mask):
                raise ShapeError("part bbox is not the tight mask bbox")
            counts[p.category] += 1
        cap = 2 if self.scenario.bilateral else 1
        if any(n > cap for n in counts.values()):
            raise ShapeError(f"category appears more than {cap} times")


# ---------------------------------------------------------------- implants


def femoral_component(n_seg: int = 28) -> TriMesh:
    """C-shaped band around the condyle centre, open towards the femoral shaft.

    Local frame in mm: origin at the condyle centre, +x anterior, +y distal
    (image down), z mediolateral.
    """
    ang = np.deg2rad(np.linspace(-40.0, 220.0, n_seg))
    unit = np.c_[np.cos(ang), np.sin(ang)]
    band = extrude_polygon_strip(16.0 * unit, 30.0 * unit, -32.0, 32.0)
    peg = box_mesh((8.0, -22.0, -10.0), (20.0, -4.0, 10.0))
    return merge_meshes([band, peg])


def tibial_component(gap: float = 12.0) -> TriMesh:
    """Tray plus keel below the femur; the radiolucent insert leaves ``gap`` mm."""
    top = 30.0 + gap
    tray = box_mesh((-33.0, top, -36.0), (33.0, top + 11.0, 36.0))
    keel = box_mesh((-9.0, top + 11.0, -9.0), (9.0, top + 36.0, 9.0))
    return merge_meshes([tray, keel])


@dataclass
class KneePose:
    femur: RigidPose
    tibia: RigidPose
    flexion_deg: float


@dataclass
class PoseSampler:
    """Flexion about the mediolateral (optical) axis plus global jitter."""

    flexion_range: tuple[float, float] = (0.0, 120.0)
    translation_jitter: float = 10.0
    inplane_jitter: float = 15.0
    tilt_jitter: float = 4.0
    depth: float = 800.0

    def sample(self, rng: np.random.Generator) -> KneePose:
        flex = float(rng.uniform(*self.flexion_range))
        spin = rotation_about("z", rng.uniform(-self.inplane_jitter, self.inplane_jitter))
        tilt = rotation_about("x", rng.uniform(-self.tilt_jitter, self.tilt_jitter)) @ rotation_about(
            "y", rng.uniform(-self.tilt_jitter, self.tilt_jitter)
        )
        jitter = rng.uniform(-self.translation_jitter, self.translation_jitter, size=2)
        world = RigidPose(tilt @ spin, np.array([jitter[0], jitter[1], self.depth]))
        femur = world
        tibia = world.compose(RigidPose(rotation_about("z", flex), np.zeros(3)))
        return KneePose(femur, tibia, flex)


@dataclass
class SceneGeometry:
    meshes: Mapping[str, TriMesh] = field(default_factory=lambda: {"femur": femoral_component(), "tibia": tibial_component()})
    camera: FluoroCamera = field(default_factory=lambda: FluoroCamera.centered(256, 240.0))
    sampler: PoseSampler = field(default_factory=PoseSampler)

    @classmethod
    def default(cls, size: int = 256) -> "SceneGeometry":
        return cls(camera=FluoroCamera.centered(size, 240.0))


# ---------------------------------------------------------------- images


def value_noise(height: int, width: int, rng: np.random.Generator, octaves: int = 3) -> np.ndarray:
    """Sum of bilinearly interpolated random lattices, scaled into [-1, 1]."""
    out = np.zeros((height, width))
    total = 0.0
    for o in range(octaves):
        cells = 4 * 2**o
        amp = 0.5**o
        lattice = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
        ys = (np.arange(height) + 0.5) * cells / height
        xs = (np.arange(width) + 0.5) * cells / width
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        out += amp * ndimage.map_coordinates(lattice, [yy, xx], order=1, mode="nearest")
        total += amp
    return out / total


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img
    return ndimage.gaussian_filter(img, sigma, mode="nearest", truncate=4.0)


def compose_image(parts, scenario: ScenarioSpec, seed: int) -> np.ndarray:
    """Render part silhouettes (boolean masks) into a degraded grayscale frame."""
    masks = [np.asarray(m, dtype=bool) for m in parts]
    if not masks:
        raise ShapeError("compose_image needs at least one mask to fix the image size")
    h, w = masks[0].shape
    if any(m.shape != (h, w) for m in masks):
        raise ShapeError("all part masks must share the image size")
    scenario.validate(w, h)
    rng = np.random.default_rng(seed)

    img = np.full((h, w), BACKGROUND_LEVEL)
    if scenario.noise_amp > 0:
        img += scenario.noise_amp * TEXTURE_SPAN * value_noise(h, w, rng)
    implant = np.logical_or.reduce(masks)
    img[implant] = IMPLANT_LEVEL
    img = gaussian_blur(img, scenario.blur_sigma)
    if math.isfinite(scenario.field_radius):
        yy, xx = np.mgrid[0:h, 0:w]
        r = np.hypot(xx + 0.5 - w / 2, yy + 0.5 - h / 2)
        img[r > scenario.field_radius] = 0.0
    if scenario.subscreen is not None:
        x, y, sw, sh = scenario.subscreen
        img[y:y + sh, x:x + sw] = scenario.subscreen_level
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- scenes


def _shift_mm(camera: FluoroCamera, pixels, depth: float) -> np.ndarray:
    s = np.asarray(pixels, dtype=float) * camera.pixel_pitch * depth / camera.source_to_detector
    return np.array([s[0], s[1], 0.0])


def _render(mesh: TriMesh, pose: RigidPose, camera: FluoroCamera, shift_px) -> np.ndarray:
    posed = pose_mesh(mesh, pose)
    if len(posed.vertices):
        posed = posed.translated(_shift_mm(camera, shift_px, float(posed.vertices[:, 2].mean())))
    return rasterize_silhouette(posed, camera)


def render_knee(geometry: SceneGeometry, pose: KneePose, crop_shift=(0.0, 0.0), overlap_shift=(0.0, 0.0)):
    """(femur_mask, tibia_mask) for one knee; crop moves both parts, overlap moves the tibia."""
    cam = geometry.camera
    femur = _render(geometry.meshes["femur"], pose.femur, cam, crop_shift)
    tib_shift = (crop_shift[0] + overlap_shift[0], crop_shift[1] + overlap_shift[1])
    tibia = _render(geometry.meshes["tibia"], pose.tibia, cam, tib_shift)
    return femur, tibia


def _centroid(mask: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    return np.array([xs.mean(), ys.mean()])


def _shift_mask(mask: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.zeros_like(mask)
    h, w = mask.shape
    src = mask[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
    out[max(0, dy):max(0, dy) + src.shape[0], max(0, dx):max(0, dx) + src.shape[1]] = src
    return out


def find_overlap_shift(geometry: SceneGeometry, pose: KneePose, extra: float, crop_shift=(0.0, 0.0)) -> tuple[float, float]:
    """Push of the tibia toward the femur, ``extra`` pixels beyond first contact."""
    femur, tibia = render_knee(geometry, pose, crop_shift)
    if not femur.any() or not tibia.any():
        return (0.0, 0.0)
    d = _centroid(femur) - _centroid(tibia)
    d /= max(np.linalg.norm(d), 1e-9)
    limit = max(geometry.camera.image_size)
    # cheap search on the shifted raster, then confirm with a true render
    start = limit
    for step in range(1, limit):
        dx, dy = (int(v) for v in np.round(d * step))
        if (femur & _shift_mask(tibia, dx, dy)).any():
            start = step
            break
    for step in range(start, limit + 1):
        shift = tuple(float(x) for x in np.round(d * (step + extra), 3))
        f, t = render_knee(geometry, pose, crop_shift, shift)
        if (f & t).any():
            return shift
    return (0.0, 0.0)


def sample_scenario(kind: str, size: tuple[int, int], rng: np.random.Generator) -> ScenarioSpec:
    """Draw degradation parameters for one scenario class; overlap shift is resolved later."""
    w, h = size
    scale = min(w, h) / 256.0
    if kind == "clean":
        return ScenarioSpec()
    base = ScenarioSpec(noise_amp=float(rng.uniform(0.2, 0.5)), field_radius=float(min(w, h) * rng.uniform(0.46, 0.6)))
    if kind == "blur":
        return replace(base, blur_sigma=float(rng.uniform(1.5, 3.0) * scale))
    if kind == "crop":
        ang = rng.uniform(0, 2 * np.pi)
        mag = rng.uniform(0.3, 0.45) * min(w, h)
        return replace(base, crop_shift=(float(mag * np.cos(ang)), float(mag * np.sin(ang))), field_radius=math.inf)
    if kind == "overlap":
        return replace(base, overlap_shift=(math.nan, math.nan))
    if kind == "bilateral":
        return replace(base, bilateral=True)
    if kind == "subscreen":
        sw, sh = int(rng.uniform(0.18, 0.3) * w), int(rng.uniform(0.12, 0.22) * h)
        corner = rng.integers(4)
        x = 2 if corner in (0, 2) else w - sw - 2
        y = 2 if corner in (0, 1) else h - sh - 2
        return replace(base, subscreen=(int(x), int(y), sw, sh), field_radius=math.inf)
    if kind == "combo":
        return replace(
            base,
            blur_sigma=float(rng.uniform(1.5, 3.0) * scale),
            overlap_shift=(math.nan, math.nan),
            crop_shift=(float(rng.uniform(-0.15, 0.15) * w), float(rng.uniform(-0.15, 0.15) * h)),
        )
    raise ConfigError(f"unknown scenario class {kind!r}")


def _check_mix(mix: Mapping[str, float]) -> tuple[list[str], np.ndarray]:
    if not mix:
        raise ConfigError("empty scenario mix")
    names = list(mix)
    unknown = [k for k in names if k not in SCENARIO_CLASSES]
    if unknown:
        raise ConfigError(f"unknown scenario classes {unknown}")
    p = np.array([float(mix[k]) for k in names])
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ConfigError(f"mix fractions must be non-negative and sum to 1, got {float(p.sum())!r}")
    return names, p


def generate_sample(index: int, seed: int, mix: Mapping[str, float], geometry: SceneGeometry) -> SynthSample:
    names, p = _check_mix(mix)
    sub_seed = (int(seed) ^ int(index)) & 0xFFFFFFFFFFFFFFFF
    rng = np.random.default_rng(sub_seed)
    kind = names[int(rng.choice(len(names), p=p))] if len(names) > 1 else names[0]
    pose = geometry.sampler.sample(rng)
    scenario = sample_scenario(kind, geometry.camera.image_size, rng)
    if math.isnan(scenario.overlap_shift[0]):
        scenario = replace(scenario, overlap_shift=find_overlap_shift(geometry, pose, float(rng.uniform(2, 6)), scenario.crop_shift))

    parts: list[Part] = []
    femur, tibia = render_knee(geometry, pose, scenario.crop_shift, scenario.overlap_shift)
    knees = [(femur, tibia)]
    if scenario.bilateral:
        other = geometry.sampler.sample(rng)
        mirror = RigidPose(rotation_about("y", 180.0), np.zeros(3))
        w = geometry.camera.image_size[0]
        side = 1 if rng.random() < 0.5 else -1
        offset = (side * float(rng.uniform(0.45, 0.6)) * w, float(rng.uniform(-0.1, 0.1)) * w)
        depth = RigidPose(np.eye(3), np.array([0.0, 0.0, float(rng.uniform(40.0, 90.0))]))
        contra = KneePose(
            depth.compose(other.femur.compose(mirror)),
            depth.compose(other.tibia.compose(mirror)),
            other.flexion_deg,
        )
        knees.append(render_knee(geometry, contra, offset))
    for knee in knees:
        for cat, mask in zip(CATEGORIES, knee):
            box = mask_bbox(mask)
            if box is not None:
                parts.append(Part(cat, mask, box))

    if parts:
        masks = [p.mask for p in parts]
    else:
        wd, ht = geometry.camera.image_size
        masks = [np.zeros((ht, wd), dtype=bool)]
    image = compose_image(masks, scenario, sub_seed)
    return SynthSample(image, parts, scenario, sub_seed, kind, pose.flexion_deg)


def generate_dataset(
    n: int,
    mix: Mapping[str, float],
    seed: int,
    geometry: SceneGeometry | None = None,
    map_fn: Callable = map,
) -> list[SynthSample]:
    """``n`` samples; ``map_fn`` may be an executor's ``map`` since every sample has its own sub-seed."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    geometry = geometry or SceneGeometry.default()
    if not geometry.meshes or all(len(m.triangles) == 0 for m in geometry.meshes.values()):
        raise ConfigError("no meshes to render")
    missing = [c for c in CATEGORIES if c not in geometry.meshes]
    if missing:
        raise ConfigError(f"missing meshes for {missing}")
    _check_mix(mix)
    return list(map_fn(lambda i: generate_sample(i, seed, mix, geometry), range(n)))


def flexion_sweep(n: int, size: int = 256, seed: int = 0, flexion=(0.0, 120.0), scenario: ScenarioSpec | None = None) -> list[SynthSample]:
    """``n`` frames of one knee bending through ``flexion`` degrees, like a fluoroscopy video."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    geometry = SceneGeometry.default(size)
    base = geometry.sampler.sample(np.random.default_rng(seed))
    scenario = scenario or ScenarioSpec()
    scenario.validate(size, size)
    frames = []
    for i, flex in enumerate(np.linspace(flexion[0], flexion[1], n)):
        tibia = base.femur.compose(RigidPose(rotation_about("z", float(flex)), np.zeros(3)))
        pose = KneePose(base.femur, tibia, float(flex))
        parts = []
        for cat, mask in zip(CATEGORIES, render_knee(geometry, pose, scenario.crop_shift, scenario.overlap_shift)):
            box = mask_bbox(mask)
            if box is not None:
                parts.append(Part(cat, mask, box))
        masks = [p.mask for p in parts] or [np.zeros((size, size), dtype=bool)]
        frames.append(SynthSample(compose_image(masks, scenario, seed + i), parts, scenario, seed + i, "sweep", float(flex)))
    return frames


GENERATOR_NAME = f"fluoroseg.synth {__version__}"
