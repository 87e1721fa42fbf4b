"""Cone-beam projection of posed triangle meshes into binary silhouettes.

The X-ray source sits at the camera origin looking down +z; the detector is
the plane z = source_to_detector. Masks are ``numpy`` boolean arrays of shape
``(height, width)``; pixel (row r, column c) has its centre at (c + 0.5, r + 0.5).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BehindSourceError, ParseError, PoseError, ShapeError

ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray  # (V, 3) millimetres
    triangles: np.ndarray  # (T, 3) vertex indices

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ShapeError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __eq__(self, other):
        if not isinstance(other, TriMesh):
            return NotImplemented
        return np.array_equal(self.vertices, other.vertices) and np.array_equal(self.triangles, other.triangles)

    def translated(self, offset) -> "TriMesh":
        return TriMesh(self.vertices + np.asarray(offset, dtype=np.float64), self.triangles)


def merge_meshes(meshes) -> TriMesh:
    verts, tris, base = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + base)
        base += len(m.vertices)
    if not verts:
        return TriMesh.empty()
    return TriMesh(np.concatenate(verts), np.concatenate(tris))


@dataclass(frozen=True)
class RigidPose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHO_TOL:
            raise PoseError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise PoseError("rotation is a reflection (det != +1)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def compose(self, first: "RigidPose") -> "RigidPose":
        """The pose applying ``first`` and then ``self``."""
        return RigidPose(self.rotation @ first.rotation, self.rotation @ first.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


def rotation_about(axis: str, degrees: float) -> np.ndarray:
    a = np.deg2rad(degrees)
    c, s = np.cos(a), np.sin(a)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    if axis == "z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    raise ValueError(f"unknown axis {axis!r}")


@dataclass(frozen=True)
class FluoroCamera:
    source_to_detector: float = 1000.0
    pixel_pitch: float = 1.0
    principal_point: tuple[float, float] = (128.0, 128.0)
    image_size: tuple[int, int] = (256, 256)  # (width, height)

    def __post_init__(self):
        if self.source_to_detector <= 0 or self.pixel_pitch <= 0:
            raise ValueError("source_to_detector and pixel_pitch must be positive")
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ValueError("image_size must be positive")
        px, py = self.principal_point
        if not (0 <= px <= w and 0 <= py <= h):
            raise ValueError("principal point must lie inside the image")

    @property
    def focal_px(self) -> float:
        return self.source_to_detector / self.pixel_pitch

    @classmethod
    def centered(cls, size: int, field_of_view_mm: float = 300.0, source_to_detector: float = 1000.0) -> "FluoroCamera":
        """Square detector of ``size`` pixels covering ``field_of_view_mm`` at the detector plane."""
        return cls(source_to_detector, field_of_view_mm / size, (size / 2, size / 2), (size, size))


def project_points(points: np.ndarray, cam: FluoroCamera) -> np.ndarray:
    """Continuous pixel coordinates (u, v) of camera-frame points, shape (..., 2)."""
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindSourceError("point at or behind the source plane")
    f = cam.focal_px
    u = cam.principal_point[0] + p[..., 0] / z * f
    v = cam.principal_point[1] + p[..., 1] / z * f
    return np.stack([u, v], axis=-1)


def project_point(p, cam: FluoroCamera) -> tuple[float, float]:
    u, v = project_points(np.asarray(p, dtype=np.float64).reshape(3), cam)
    return float(u), float(v)


def pose_mesh(mesh: TriMesh, pose: RigidPose) -> TriMesh:
    return TriMesh(pose.apply(mesh.vertices), mesh.triangles)


def _rasterize_triangles(tri_uv: np.ndarray, width: int, height: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    for a, b, c in tri_uv.tolist():
        area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if area == 0:
            continue
        if area < 0:
            b, c = c, b
        x0 = max(math.ceil(min(a[0], b[0], c[0]) - 0.5), 0)
        x1 = min(math.floor(max(a[0], b[0], c[0]) - 0.5), width - 1)
        y0 = max(math.ceil(min(a[1], b[1], c[1]) - 0.5), 0)
        y1 = min(math.floor(max(a[1], b[1], c[1]) - 0.5), height - 1)
        if x0 > x1 or y0 > y1:
            continue
        px = np.arange(x0, x1 + 1) + 0.5
        py = (np.arange(y0, y1 + 1) + 0.5)[:, None]
        inside = None
        for p, q in ((a, b), (b, c), (c, a)):
            dx, dy = q[0] - p[0], q[1] - p[1]
            e = dx * (py - p[1]) - dy * (px - p[0])
            # shared edges are owned by exactly one of the two triangles
            ok = e >= 0 if (dy < 0 or (dy == 0 and dx > 0)) else e > 0
            inside = ok if inside is None else inside & ok
        mask[y0:y1 + 1, x0:x1 + 1] |= inside
    return mask


def rasterize_silhouette(mesh: TriMesh, cam: FluoroCamera) -> np.ndarray:
    """Pixels whose centre falls inside the projection of at least one triangle."""
    width, height = cam.image_size
    if len(mesh.triangles) == 0:
        return np.zeros((height, width), dtype=bool)
    uv = project_points(mesh.vertices, cam)
    return _rasterize_triangles(uv[mesh.triangles], width, height)


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Tight (x, y, w, h) of the set pixels, or None for an empty mask."""
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1)


# ---------------------------------------------------------------- files


def write_off(mesh: TriMesh, path) -> None:
    lines = ["OFF", f"{len(mesh.vertices)} {len(mesh.triangles)} 0"]
    lines += [" ".join(repr(float(c)) for c in v) for v in mesh.vertices]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def read_off(path) -> TriMesh:
    tokens = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.append(line.split())
    if not tokens or tokens[0][0] != "OFF":
        raise ParseError(f"{path}: missing OFF header")
    head = tokens[0][1:] or tokens[1]
    body = tokens[1:] if tokens[0][1:] else tokens[2:]
    try:
        nv, nf = int(head[0]), int(head[1])
        verts = np.array([[float(x) for x in row[:3]] for row in body[:nv]])
        tris = []
        for row in body[nv:nv + nf]:
            if int(row[0]) != 3:
                raise ParseError(f"{path}: only triangular faces are supported")
            tris.append([int(i) for i in row[1:4]])
    except (IndexError, ValueError) as exc:
        raise ParseError(f"{path}: malformed OFF body") from exc
    if len(verts) != nv or len(tris) != nf:
        raise ParseError(f"{path}: expected {nv} vertices and {nf} faces")
    return TriMesh(verts.reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3))


def write_pose(pose: RigidPose, path) -> None:
    nums = list(pose.rotation.reshape(-1)) + list(pose.translation)
    Path(path).write_text(" ".join(repr(float(x)) for x in nums) + "\n")


def read_pose(path) -> RigidPose:
    try:
        nums = [float(x) for x in Path(path).read_text().split()]
    except ValueError as exc:
        raise ParseError(f"{path}: non-numeric pose") from exc
    if len(nums) != 12:
        raise ParseError(f"{path}: expected 12 numbers, got {len(nums)}")
    return RigidPose(np.array(nums[:9]).reshape(3, 3), np.array(nums[9:]))


# ---------------------------------------------------------------- primitives


def box_mesh(lo, hi) -> TriMesh:
    """Closed axis-aligned box between corners ``lo`` and ``hi``."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    v = np.array([[x, y, z] for z in (lo[2], hi[2]) for y in (lo[1], hi[1]) for x in (lo[0], hi[0])])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = [t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))]
    return TriMesh(v, np.array(tris))


def plate_mesh(side: float, depth: float, center=(0.0, 0.0)) -> TriMesh:
    """Zero-thickness square facing the source, two triangles."""
    h = side / 2
    cx, cy = center
    v = np.array([[cx - h, cy - h, depth], [cx + h, cy - h, depth], [cx + h, cy + h, depth], [cx - h, cy + h, depth]])
    return TriMesh(v, np.array([[0, 1, 2], [0, 2, 3]]))


def extrude_polygon_strip(inner: np.ndarray, outer: np.ndarray, z0: float, z1: float) -> TriMesh:
    """Prism over the band between two matching 2-D polylines, extruded along z."""
    n = len(inner)
    ring = np.concatenate([inner, outer])  # 2n points
    v = np.concatenate([np.c_[ring, np.full(2 * n, z0)], np.c_[ring, np.full(2 * n, z1)]])
    tris = []
    for off in (0, 2 * n):
        for i in range(n - 1):
            a, b, c, d = off + i, off + i + 1, off + n + i + 1, off + n + i
            tris += [(a, b, c), (a, c, d)]
    # side walls along both polylines and the two end caps
    loops = [[i for i in range(n)], [n + i for i in range(n)], [0, n], [n - 1, 2 * n - 1]]
    for loop in loops:
        for i in range(len(loop) - 1):
            a, b = loop[i], loop[i + 1]
            tris += [(a, b, b + 2 * n), (a, b + 2 * n, a + 2 * n)]
    return TriMesh(v, np.array(tris))
