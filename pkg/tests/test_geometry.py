import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fluoroseg import geometry as G
from fluoroseg.errors import BehindSourceError, ParseError, PoseError


CAM = G.FluoroCamera(1000.0, 0.5, (256.0, 256.0), (512, 512))


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


class TestProjectPoint:
    def test_axis_hits_principal_point(self):
        for z in (1.0, 250.0, 900.0):
            assert G.project_point((0, 0, z), CAM) == (256.0, 256.0)

    def test_hand_evaluated_magnification(self):
        u, v = G.project_point((10, 0, 500), CAM)
        assert u == pytest.approx(296.0, abs=1e-12)
        assert v == 256.0

    def test_doubling_depth_halves_offset(self):
        u1, v1 = G.project_point((7, -3, 400), CAM)
        u2, v2 = G.project_point((7, -3, 800), CAM)
        assert u2 - 256 == pytest.approx((u1 - 256) / 2, rel=1e-14)
        assert v2 - 256 == pytest.approx((v1 - 256) / 2, rel=1e-14)

    @pytest.mark.parametrize("z", [0.0, -5.0])
    def test_behind_source(self, z):
        with pytest.raises(BehindSourceError):
            G.project_point((1, 1, z), CAM)


class TestPose:
    def test_identity(self):
        m = G.box_mesh((-1, -2, 3), (4, 5, 6))
        assert G.pose_mesh(m, G.RigidPose()) == m

    def test_translation_is_rigid(self):
        m = G.box_mesh((-1, -2, 3), (4, 5, 6))
        t = np.array([3.0, -1.0, 10.0])
        out = G.pose_mesh(m, G.RigidPose(np.eye(3), t))
        np.testing.assert_allclose(out.vertices, m.vertices + t)
        d0 = np.linalg.norm(m.vertices[:, None] - m.vertices[None], axis=-1)
        d1 = np.linalg.norm(out.vertices[:, None] - out.vertices[None], axis=-1)
        np.testing.assert_allclose(d0, d1, atol=1e-12)
        np.testing.assert_array_equal(out.triangles, m.triangles)

    def test_composition(self):
        rng = np.random.default_rng(0)
        m = G.box_mesh((-10, -5, -3), (8, 9, 4))
        a = G.RigidPose(random_rotation(rng), rng.normal(size=3) * 20)
        b = G.RigidPose(random_rotation(rng), rng.normal(size=3) * 20)
        ba = b.compose(a)
        # independent matrix product via homogeneous 4x4 matrices
        def h(p):
            out = np.eye(4)
            out[:3, :3], out[:3, 3] = p.rotation, p.translation
            return out
        hm = np.einsum("ij,jk->ik", h(b), h(a))
        np.testing.assert_allclose(ba.rotation, hm[:3, :3], atol=1e-12)
        np.testing.assert_allclose(ba.translation, hm[:3, 3], atol=1e-12)
        twice = G.pose_mesh(G.pose_mesh(m, a), b)
        np.testing.assert_allclose(twice.vertices, G.pose_mesh(m, ba).vertices, atol=1e-9)

    def test_rejects_non_orthonormal(self):
        with pytest.raises(PoseError):
            G.RigidPose(np.diag([1.0, 1.0, 1.0 + 1e-6]), np.zeros(3))
        with pytest.raises(PoseError):
            G.RigidPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


class TestRasterize:
    def test_empty_mesh(self):
        mask = G.rasterize_silhouette(G.TriMesh.empty(), CAM)
        assert mask.shape == (512, 512) and not mask.any()

    def test_behind_source(self):
        with pytest.raises(BehindSourceError):
            G.rasterize_silhouette(G.plate_mesh(10, -1.0), CAM)

    def test_centered_plate_is_filled_square(self):
        side, z = 31.3, 700.0
        mask = G.rasterize_silhouette(G.plate_mesh(side, z), CAM)
        px = side * (1000.0 / z) / 0.5
        analytic = px * px
        assert abs(mask.sum() - analytic) <= 4 * px
        x, y, w, h = G.mask_bbox(mask)
        assert mask[y:y + h, x:x + w].all()
        assert abs((x + w / 2) - 256) <= 0.5 and abs((y + h / 2) - 256) <= 0.5

    def test_shared_diagonal_has_no_seam(self):
        # pixel centres exactly on the diagonal belong to one triangle
        cam = G.FluoroCamera(1000.0, 1.0, (0.0, 0.0), (16, 16))
        v = np.array([[0.0, 0, 1000], [16, 0, 1000], [16, 16, 1000], [0, 16, 1000]])
        a = G.TriMesh(v, [[0, 1, 2]])
        b = G.TriMesh(v, [[0, 2, 3]])
        ma, mb = G.rasterize_silhouette(a, cam), G.rasterize_silhouette(b, cam)
        assert not (ma & mb).any()
        assert (ma | mb).all()

    def test_union_is_or(self):
        p1 = G.plate_mesh(20, 600, center=(-30, 0))
        p2 = G.plate_mesh(15, 650, center=(25, 10))
        both = G.rasterize_silhouette(G.merge_meshes([p1, p2]), CAM)
        np.testing.assert_array_equal(both, G.rasterize_silhouette(p1, CAM) | G.rasterize_silhouette(p2, CAM))

    def test_zero_area_triangle_skipped(self):
        v = np.array([[0.0, 0, 500], [10, 0, 500], [20, 0, 500]])
        assert not G.rasterize_silhouette(G.TriMesh(v, [[0, 1, 2]]), CAM).any()

    def test_rotation_about_axis_keeps_area(self):
        plate = G.plate_mesh(40, 700)
        base = G.rasterize_silhouette(plate, CAM).sum()
        for deg in (15, 30, 45, 60, 77):
            rot = G.RigidPose(G.rotation_about("z", deg), np.zeros(3))
            area = G.rasterize_silhouette(G.pose_mesh(plate, rot), CAM).sum()
            assert abs(area - base) / base < 0.02

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_bbox_within_projected_vertex_bounds(self, seed):
        rng = np.random.default_rng(seed)
        m = G.box_mesh(rng.uniform(-40, 0, 3), rng.uniform(1, 40, 3))
        pose = G.RigidPose(random_rotation(rng) if rng.random() < 0.5 else np.eye(3), [*rng.uniform(-60, 60, 2), 600])
        posed = G.pose_mesh(m, pose)
        mask = G.rasterize_silhouette(posed, CAM)
        box = G.mask_bbox(mask)
        if box is None:
            return
        uv = G.project_points(posed.vertices, CAM)
        x, y, w, h = box
        assert x >= np.floor(uv[:, 0].min()) - 1 and x + w <= np.ceil(uv[:, 0].max()) + 1
        assert y >= np.floor(uv[:, 1].min()) - 1 and y + h <= np.ceil(uv[:, 1].max()) + 1


class TestMaskBbox:
    def test_single_pixel(self):
        m = np.zeros((10, 10), bool)
        m[7, 3] = True
        assert G.mask_bbox(m) == (3, 7, 1, 1)

    def test_full_and_empty(self):
        assert G.mask_bbox(np.ones((6, 9), bool)) == (0, 0, 9, 6)
        assert G.mask_bbox(np.zeros((6, 9), bool)) is None

    def test_l_shape(self):
        m = np.zeros((8, 8), bool)
        m[2:6, 1] = True  # vertical stroke, rows 2-5
        m[5, 1:5] = True  # foot, cols 1-4
        assert G.mask_bbox(m) == (1, 2, 4, 4)


class TestFiles:
    def test_off_round_trip(self, tmp_path):
        m = G.box_mesh((-1.25, 2, 3), (4, 5.5, 6))
        G.write_off(m, tmp_path / "m.off")
        assert (tmp_path / "m.off").read_text().startswith("OFF\n")
        assert G.read_off(tmp_path / "m.off") == m

    def test_off_rejects_quads(self, tmp_path):
        (tmp_path / "q.off").write_text("OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
        with pytest.raises(ParseError):
            G.read_off(tmp_path / "q.off")

    def test_pose_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        p = G.RigidPose(random_rotation(rng), rng.normal(size=3))
        G.write_pose(p, tmp_path / "p.txt")
        q = G.read_pose(tmp_path / "p.txt")
        np.testing.assert_array_equal(p.rotation, q.rotation)
        np.testing.assert_array_equal(p.translation, q.translation)
        (tmp_path / "bad.txt").write_text("1 2 3")
        with pytest.raises(ParseError):
            G.read_pose(tmp_path / "bad.txt")
