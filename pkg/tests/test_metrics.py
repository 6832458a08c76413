import numpy as np
import pytest

from sdfrecon.geom import Box, Rng, Sphere, Translate, yaw_matrix
from sdfrecon.metrics import (
    Bvh,
    EmptyMesh,
    MetricReport,
    brute_force_distances,
    chamfer,
    chamfer_from_samples,
    closest_point_on_triangle,
    evaluate,
    map_difference,
    normal_error,
    point_to_surface,
    sample_surface,
    surface_distances,
)
from sdfrecon.normalmap import NormalMap
from sdfrecon.render import TriangleMesh, marching_cubes, rasterize_normal_map


@pytest.fixture(scope="module")
def sphere_mesh():
    return marching_cubes(Sphere((0.0, 0.0, 0.0), 0.5), 48)


@pytest.fixture(scope="module")
def box_mesh():
    return marching_cubes(Translate(Box((0.0, 0.0, 0.0), (0.3, 0.4, 0.2)), (0.2, 0.0, 0.1)), 40)


def single_triangle():
    return TriangleMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))


class TestTriangleDistance:
    def test_regions(self):
        a, b, c = np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]]), np.array([[0.0, 1, 0]])
        cases = {
            (0.2, 0.2, 0.7): (0.2, 0.2, 0.0),  # face
            (-1.0, -1.0, 0.0): (0.0, 0.0, 0.0),  # vertex a
            (2.0, -0.5, 0.0): (1.0, 0.0, 0.0),  # vertex b
            (0.5, -1.0, 1.0): (0.5, 0.0, 0.0),  # edge ab
            (1.0, 1.0, 0.0): (0.5, 0.5, 0.0),  # edge bc
            (-0.3, 0.4, 0.0): (0.0, 0.4, 0.0),  # edge ca
        }
        for p, q in cases.items():
            np.testing.assert_allclose(closest_point_on_triangle(np.array([p]), a, b, c)[0], q, atol=1e-15)

    def test_vertices_are_on_surface(self, sphere_mesh):
        d = surface_distances(sphere_mesh.vertices[:500], sphere_mesh)
        assert np.max(d) < 1e-12

    def test_height_above_triangle(self):
        d = surface_distances(np.array([[0.25, 0.25, 0.3], [0.25, 0.25, -0.7]]), single_triangle())
        np.testing.assert_allclose(d, [0.3, 0.7], atol=1e-15)

    def test_degenerate_triangle(self):
        mesh = TriangleMesh(np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]]), np.array([[0, 1, 2]]))
        d = brute_force_distances(np.array([[1.0, 1.0, 0.0], [3.0, 0.0, 0.0]]), mesh)
        np.testing.assert_allclose(d, [1.0, 1.0], atol=1e-12)


class TestBvh:
    def test_matches_brute_force(self, box_mesh):
        pts = Rng(0).generator.uniform(-1, 1, size=(400, 3))
        exact = brute_force_distances(pts, box_mesh)
        np.testing.assert_allclose(surface_distances(pts, box_mesh), exact, atol=1e-9, rtol=0)
        np.testing.assert_allclose(Bvh.build(box_mesh).distances(pts), exact, atol=1e-9, rtol=0)

    @pytest.mark.parametrize("leaf", [1, 3, 64])
    def test_leaf_sizes(self, sphere_mesh, leaf):
        pts = Rng(1).generator.uniform(-0.8, 0.8, size=(100, 3))
        np.testing.assert_allclose(
            Bvh.build(sphere_mesh, leaf).distances(pts), brute_force_distances(pts, sphere_mesh), atol=1e-9, rtol=0
        )

    def test_point_to_surface_mean(self, box_mesh):
        pts = Rng(2).generator.uniform(-1, 1, size=(200, 3))
        assert point_to_surface(pts, box_mesh) == pytest.approx(brute_force_distances(pts, box_mesh).mean(), abs=1e-9)


class TestSampling:
    def test_points_lie_on_mesh(self, box_mesh):
        s = sample_surface(box_mesh, 2000, Rng(0))
        assert s.shape == (2000, 3)
        assert np.max(surface_distances(s, box_mesh)) < 1e-12

    def test_area_uniform(self):
        # two triangles of area 1/2 and 2
        v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 0, 0], [7, 0, 0], [5, 2, 0]])
        mesh = TriangleMesh(v, np.array([[0, 1, 2], [3, 4, 5]]))
        s = sample_surface(mesh, 20000, Rng(3))
        assert np.mean(s[:, 0] > 3) == pytest.approx(0.8, abs=0.01)

    def test_deterministic(self, box_mesh):
        np.testing.assert_array_equal(sample_surface(box_mesh, 50, Rng(4)), sample_surface(box_mesh, 50, Rng(4)))


def sphere_offset_oracle(r, d, n=400):
    """Mean distance from a sphere of radius r to the same sphere shifted by d,
    by quadrature over the polar angle (area weight sin(theta))."""
    theta = (np.arange(n) + 0.5) * np.pi / n
    p = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    dist = np.abs(np.linalg.norm(p - [d, 0.0], axis=1) - r)
    w = np.sin(theta)
    return float(np.sum(dist * w) / np.sum(w))


class TestChamfer:
    def test_identical(self, sphere_mesh):
        assert chamfer(sphere_mesh, sphere_mesh, 2000, Rng(0)) < 1e-6

    def test_offset_sphere_matches_quadrature(self):
        a = marching_cubes(Sphere((0.0, 0.0, 0.0), 0.5), 64)
        b = marching_cubes(Sphere((0.1, 0.0, 0.0), 0.5), 64)
        oracle = sphere_offset_oracle(0.5, 0.1)
        assert oracle == pytest.approx(0.05, rel=0.02)
        assert abs(chamfer(a, b, 5000, Rng(1)) - oracle) < 0.1 * oracle

    def test_symmetric(self, sphere_mesh, box_mesh):
        sa = sample_surface(sphere_mesh, 500, Rng(2))
        sb = sample_surface(box_mesh, 500, Rng(3))
        assert chamfer_from_samples(sa, sphere_mesh, sb, box_mesh) == chamfer_from_samples(sb, box_mesh, sa, sphere_mesh)

    def test_converges_with_samples(self, sphere_mesh, box_mesh):
        c1 = chamfer(sphere_mesh, box_mesh, 20000, Rng(4))
        c2 = chamfer(sphere_mesh, box_mesh, 40000, Rng(4))
        assert abs(c1 - c2) / c2 < 0.02

    def test_too_few_samples(self, sphere_mesh):
        with pytest.raises(ValueError):
            chamfer(sphere_mesh, sphere_mesh, 10, Rng(0))

    def test_empty_mesh(self, sphere_mesh):
        empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
        with pytest.raises(EmptyMesh):
            chamfer(empty, sphere_mesh, 1000, Rng(0))
        with pytest.raises(EmptyMesh):
            normal_error(sphere_mesh, empty)


def loop_difference(a: NormalMap, b: NormalMap) -> float:
    total, count = 0.0, 0
    h, w = a.mask.shape
    for i in range(h):
        for j in range(w):
            if a.mask[i, j] or b.mask[i, j]:
                na = a.normals[i, j] if a.mask[i, j] else np.zeros(3)
                nb = b.normals[i, j] if b.mask[i, j] else np.zeros(3)
                total += np.sqrt(np.sum((na - nb) ** 2))
                count += 1
    return total / count


class TestNormalError:
    def test_identical(self, box_mesh):
        err, per_view = normal_error(box_mesh, box_mesh, w=64, h=64)
        assert err == 0.0 and set(per_view) == {0, 90, 180, 270}

    def test_rotated_matches_loop(self, box_mesh):
        turned = box_mesh.transformed(yaw_matrix(180.0))
        err, per_view = normal_error(box_mesh, turned, views=(0, 90), w=32, h=32)
        for v, e in per_view.items():
            ref = loop_difference(rasterize_normal_map(box_mesh, v, 32, 32), rasterize_normal_map(turned, v, 32, 32))
            assert e == pytest.approx(ref, abs=1e-12)
        assert err == pytest.approx(np.mean(list(per_view.values())), abs=1e-15)
        assert err > 0.1

    def test_disjoint_silhouettes(self):
        left = marching_cubes(Sphere((-0.5, 0.0, 0.0), 0.3), 40)
        right = marching_cubes(Sphere((0.5, 0.0, 0.0), 0.3), 40)
        err, _ = normal_error(left, right, views=(0,), w=64, h=64)
        # every union pixel pairs a unit normal with zero
        assert err == pytest.approx(1.0, abs=1e-9)
        assert normal_error(left, right, views=(0,), w=64, h=64, union=False)[0] == 0.0

    def test_map_difference_counts(self):
        mask_a = np.zeros((4, 4), bool)
        mask_a[0, :2] = True
        mask_b = np.zeros((4, 4), bool)
        mask_b[0, 1:3] = True
        n = np.zeros((4, 4, 3))
        n[..., 2] = 1.0
        a, b = NormalMap(n.copy(), mask_a), NormalMap(n.copy(), mask_b)
        assert map_difference(a, b) == pytest.approx(2.0 / 3.0)
        assert map_difference(a, b, union=False) == 0.0


class TestReport:
    def test_evaluate_identical(self, box_mesh):
        rep = evaluate(box_mesh, box_mesh, Rng(0), n_samples=1000, w=32, h=32)
        assert rep.chamfer < 1e-6 and rep.p2s < 1e-6
        assert rep.normal_error == 0.0 and rep.side_normal_error == 0.0

    def test_csv_and_text(self):
        rep = MetricReport(0.1, 0.2, 0.3, 0.4, {0: 0.25, 90: 0.5}, 0.05, 0.06)
        text = rep.to_csv("config=abc seed=1")
        lines = text.splitlines()
        assert lines[0] == "# config=abc seed=1"
        assert lines[1].split(",")[:4] == ["chamfer", "p2s", "normal_error", "side_normal_error"]
        assert [float(x) for x in lines[2].split(",")] == [0.1, 0.2, 0.3, 0.4, 0.05, 0.06, 0.25, 0.5]
        assert "view  90: 0.500000" in rep.to_text()
