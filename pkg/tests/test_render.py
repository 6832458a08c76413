import numpy as np
import pytest

from conftest import toy_field
from sdfrecon.field import warm_start
from sdfrecon.geom import Box, Capsule, Rng, Rotate, Sphere, Union, capsule_person_scene
from sdfrecon.m2o import ANALYTIC, StencilConfig, m2o_gradient
from sdfrecon.normalmap import angular_error_deg, view_matrix
from sdfrecon.render import (
    EmptySurface,
    TriangleMesh,
    canonical_faces,
    marching_cubes,
    mesh_from_volume,
    raymarch_backprop,
    raymarch_normal_map,
    rasterize_normal_map,
    read_obj,
    render_field,
    write_obj,
)

SPHERE = Sphere((0.0, 0.0, 0.0), 0.5)
CFG = StencilConfig(1e-4)


class TestRaymarch:
    @pytest.mark.parametrize("view", [0, 90, 180, 270])
    def test_center_pixel_faces_camera(self, view):
        m = raymarch_normal_map(SPHERE, view, 33, 33, CFG)
        np.testing.assert_allclose(m.normals[16, 16], [0.0, 0.0, 1.0], atol=1e-3)

    def test_positive_field_is_empty(self):
        m = raymarch_normal_map(lambda p: np.full(len(p), 0.3), 0, 16, 16, CFG)
        assert not m.mask.any()

    def test_silhouette_area(self):
        w = h = 128
        m = raymarch_normal_map(SPHERE, 90, w, h, CFG)
        r_pix = 0.5 * w / 2
        assert m.mask.mean() == pytest.approx(np.pi * r_pix**2 / (w * h), rel=0.02)

    def test_unit_normals(self):
        m = raymarch_normal_map(capsule_person_scene()[0], 90, 64, 64, CFG)
        np.testing.assert_allclose(np.linalg.norm(m.normals[m.mask], axis=1), 1.0, atol=1e-12)

    def test_hits_lie_on_surface(self):
        r = render_field(SPHERE, 0, 32, 32, CFG)
        assert np.max(np.abs(SPHERE.value(r.hits))) < 1e-4


class TestRaymarchBackprop:
    def setup_method(self):
        from conftest import small_scene
        self.field = toy_field(small_scene(), width=16, seed=1)
        # fit the prior so the toy field has a visible surface
        warm_start(self.field, Rng(0))
        self.cfg = StencilConfig(0.01)

    def test_has_hits(self):
        assert render_field(self.field, 0, 16, 16, self.cfg).normal_map.mask.sum() > 10

    def test_zero_upstream(self):
        g = raymarch_backprop(self.field, 0, 16, 16, self.cfg, np.zeros((16, 16, 3)))
        assert g.max_abs() == 0.0

    def test_single_pixel_finite_difference(self):
        r = render_field(self.field, 90, 16, 16, self.cfg)
        up = np.zeros((16 * 16, 3))
        k = r.pixels[len(r.pixels) // 2]
        up[k] = [0.3, -0.5, 0.8]
        grad = raymarch_backprop(self.field, 90, 16, 16, self.cfg, up.reshape(16, 16, 3), rendered=r)
        R = view_matrix(90)
        hit = r.hits[list(r.pixels).index(k)][None]

        def scalar(f):
            g = m2o_gradient(f, hit, self.cfg)[0]
            return float(up[k] @ (R @ (g / np.linalg.norm(g))))

        h = 1e-6
        checked = 0
        for key, idx in [("W0", (0, 3)), ("W1", (4, 5)), ("W0", (7, 1)), ("b0", (2,)), ("W2", (6, 0))]:
            fp, fm = self.field.copy(), self.field.copy()
            fp.params[key][idx] += h
            fm.params[key][idx] -= h
            fd = (scalar(fp) - scalar(fm)) / (2 * h)
            if abs(fd) > 1e-8:
                assert abs(grad[key][idx] - fd) / abs(fd) < 1e-3
                checked += 1
        assert checked >= 3

    def test_additive_over_pixels(self):
        r = render_field(self.field, 0, 16, 16, self.cfg)
        up = Rng(0).generator.normal(size=(16, 16, 3))
        a, b = up.copy(), up.copy()
        a[8:] = 0.0
        b[:8] = 0.0
        whole = raymarch_backprop(self.field, 0, 16, 16, self.cfg, up, rendered=r)
        parts = raymarch_backprop(self.field, 0, 16, 16, self.cfg, a, rendered=r) + \
            raymarch_backprop(self.field, 0, 16, 16, self.cfg, b, rendered=r)
        for key in whole.arrays:
            np.testing.assert_allclose(whole[key], parts[key], atol=1e-12)


class TestMarchingCubes:
    def test_sphere_vertices_within_cell_diagonal(self):
        m = marching_cubes(SPHERE, 64)
        diag = 2 * np.sqrt(3) / 64
        assert np.all(np.abs(np.linalg.norm(m.vertices, axis=1) - 0.5) <= diag)

    def test_watertight_and_outward(self):
        m = marching_cubes(SPHERE, 32)
        assert m.is_watertight()
        assert m.signed_volume() == pytest.approx(4 / 3 * np.pi * 0.125, rel=0.02)
        person = marching_cubes(capsule_person_scene()[0], 64)
        assert person.is_watertight() and person.signed_volume() > 0

    def test_constant_field_raises(self):
        with pytest.raises(EmptySurface):
            marching_cubes(lambda p: np.ones(len(p)), 16)

    def test_sign_flip_reverses_orientation(self):
        shape = Union((SPHERE, Box((0.4, 0.3, 0.0), (0.2, 0.2, 0.3))))
        m = marching_cubes(shape, 32)
        neg = marching_cubes(lambda p: -shape.value(p), 32)
        np.testing.assert_array_equal(m.vertices, neg.vertices)
        np.testing.assert_array_equal(canonical_faces(m.triangles[:, ::-1]), neg.triangles)

    def test_resolution_floor(self):
        with pytest.raises(ValueError):
            marching_cubes(SPHERE, 8)

    def test_mesh_from_volume_matches(self):
        xs = np.linspace(-1, 1, 24)
        grid = np.stack(np.meshgrid(xs, xs, xs, indexing="ij"), axis=-1).reshape(-1, 3)
        vol = SPHERE.value(grid).reshape(24, 24, 24)
        np.testing.assert_array_equal(mesh_from_volume(vol).triangles, marching_cubes(SPHERE, 24).triangles)


class TestRasterize:
    def test_single_front_triangle(self):
        mesh = TriangleMesh(np.array([[-3.0, -3.0, 0.0], [3.0, -3.0, 0.0], [0.0, 3.0, 0.0]]), np.array([[0, 1, 2]]))
        m = rasterize_normal_map(mesh, 0, 16, 16)
        assert m.mask.all()
        np.testing.assert_allclose(m.normals[m.mask], np.tile([0.0, 0.0, 1.0], (256, 1)), atol=1e-15)

    def test_empty_mesh(self):
        m = rasterize_normal_map(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int)), 0, 8, 8)
        assert not m.mask.any()

    def test_depth_test_keeps_nearest(self):
        near = [[-3.0, -3.0, 0.5], [3.0, -3.0, 0.5], [0.0, 3.0, 0.5]]
        far = [[-3.0, -3.0, -0.5], [0.0, 3.0, -0.5], [3.0, -3.0, -0.5]]  # faces away
        mesh = TriangleMesh(np.array(far + near), np.array([[0, 1, 2], [3, 4, 5]]))
        m = rasterize_normal_map(mesh, 0, 8, 8)
        np.testing.assert_allclose(m.normals[m.mask][:, 2], 1.0)

    def test_agrees_with_raymarch(self):
        mesh = marching_cubes(SPHERE, 64)
        a = rasterize_normal_map(mesh, 0, 128, 128)
        b = raymarch_normal_map(SPHERE, 0, 128, 128, CFG)
        assert angular_error_deg(a, b).mean() < 3.0
        np.testing.assert_allclose(np.linalg.norm(a.normals[a.mask], axis=1), 1.0, atol=1e-12)

    def test_yaw_equivariance(self):
        shape = Union((Capsule((-0.3, -0.2, 0.1), (0.2, 0.4, -0.2), 0.15), Box((0.3, -0.3, 0.2), (0.15, 0.2, 0.1))))
        # the view at yaw v sees R(v) @ world, so the target rotated by R(90)
        # seen from view 0 is the original seen from view 90
        rotated = Rotate(shape, 90.0)
        a = rasterize_normal_map(marching_cubes(shape, 64), 90, 96, 96)
        b = rasterize_normal_map(marching_cubes(rotated, 64), 0, 96, 96)
        assert angular_error_deg(a, b).mean() < 1.0
        c = raymarch_normal_map(shape, 90, 96, 96, CFG)
        d = raymarch_normal_map(rotated, 0, 96, 96, CFG)
        assert angular_error_deg(c, d).mean() < 1.0


def test_obj_round_trip(tmp_path):
    m = marching_cubes(SPHERE, 16)
    write_obj(tmp_path / "s.obj", m)
    back = read_obj(tmp_path / "s.obj")
    np.testing.assert_array_equal(back.triangles, m.triangles)
    np.testing.assert_allclose(back.vertices, m.vertices, atol=1e-9)
