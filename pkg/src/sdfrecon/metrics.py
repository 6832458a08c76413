"""Chamfer, point-to-surface and normal-image error between two meshes."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from sdfrecon.geom import Rng
from sdfrecon.normalmap import CANONICAL_VIEWS, SIDE_VIEWS
from sdfrecon.render import TriangleMesh, rasterize_normal_map

LEAF_SIZE = 8


class EmptyMesh(ValueError):
    pass


def _check(mesh: TriangleMesh):
    if mesh is None or len(mesh.triangles) == 0:
        raise EmptyMesh("mesh has no triangles")


# --------------------------------------------------------------------------
# Exact point-triangle distance
# --------------------------------------------------------------------------

def closest_point_on_triangle(p, a, b, c):
    """Closest points on triangles (a, b, c) to points p; all (N, 3).

    Region tests follow the usual vertex / edge / face Voronoi split."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def assign(cond, value):
        nonlocal done
        sel = cond & ~done
        out[sel] = value[sel] if value.ndim == 2 else value
        done |= sel

    def safe_div(n, d):
        return n / np.where(d != 0, d, 1.0)

    assign((d1 <= 0) & (d2 <= 0), a)
    assign((d3 >= 0) & (d4 <= d3), b)
    t = safe_div(d1, d1 - d3)
    assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + t[:, None] * ab)
    assign((d6 >= 0) & (d5 <= d6), c)
    t = safe_div(d2, d2 - d6)
    assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + t[:, None] * ac)
    t = safe_div(d4 - d3, (d4 - d3) + (d5 - d6))
    assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + t[:, None] * (c - b))
    denom = va + vb + vc
    v = safe_div(vb, denom)
    w = safe_div(vc, denom)
    assign(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)
    return out


def point_triangle_distance(p, a, b, c) -> np.ndarray:
    return np.linalg.norm(p - closest_point_on_triangle(p, a, b, c), axis=1)


def brute_force_distances(points, mesh: TriangleMesh) -> np.ndarray:
    """Reference scan over every triangle."""
    _check(mesh)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = mesh.vertices[mesh.triangles]
    best = np.full(len(pts), np.inf)
    for t in tri:
        rep = np.broadcast_to(t, (len(pts), 3, 3))
        best = np.minimum(best, point_triangle_distance(pts, rep[:, 0], rep[:, 1], rep[:, 2]))
    return best


# --------------------------------------------------------------------------
# Bounding-volume hierarchy
# --------------------------------------------------------------------------

@dataclass
class Bvh:
    """Median-split tree over triangle centroids, stored as flat arrays.

    Node k has box [lo[k], hi[k]]; internal nodes have children left[k] and
    right[k]; leaves (left == -1) own triangles order[start[k]:stop[k]]."""

    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    stop: np.ndarray
    order: np.ndarray
    tri: np.ndarray  # (T, 3, 3) corners
    leaf_size: int

    @classmethod
    def build(cls, mesh: TriangleMesh, leaf_size: int = LEAF_SIZE) -> "Bvh":
        _check(mesh)
        tri = mesh.vertices[mesh.triangles]
        tmin, tmax = tri.min(axis=1), tri.max(axis=1)
        cent = tri.mean(axis=1)
        order = np.arange(len(tri))
        lo, hi, left, right, start, stop = [], [], [], [], [], []
        stack = [(0, len(tri), -1, 0)]
        while stack:
            s, e, parent, side = stack.pop()
            k = len(lo)
            idx = order[s:e]
            lo.append(tmin[idx].min(axis=0))
            hi.append(tmax[idx].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(s)
            stop.append(e)
            if parent >= 0:
                (left if side == 0 else right)[parent] = k
            if e - s > leaf_size:
                c = cent[idx]
                axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
                # stable sort keeps the build deterministic
                order[s:e] = idx[np.argsort(c[:, axis], kind="stable")]
                mid = (s + e) // 2
                stack.append((mid, e, k, 1))
                stack.append((s, mid, k, 0))
        return cls(
            np.array(lo), np.array(hi), np.array(left), np.array(right),
            np.array(start), np.array(stop), order, tri, leaf_size,
        )

    def box_distance(self, points, nodes) -> np.ndarray:
        d = np.maximum(self.lo[nodes] - points, 0.0) + np.maximum(points - self.hi[nodes], 0.0)
        return np.linalg.norm(d, axis=1)

    def distances(self, points, upper: np.ndarray | None = None) -> np.ndarray:
        """Exact distance from each point to the nearest triangle.

        ``upper`` is an optional per-point upper bound used for pruning
        (e.g. distance to the nearest vertex)."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        best = np.full(len(pts), np.inf) if upper is None else np.asarray(upper, dtype=np.float64).copy()
        # tiny slack so that a bound equal to the true distance never prunes it
        best = best * (1 + 1e-12) + 1e-15
        exact = np.full(len(pts), np.inf)
        qp = np.arange(len(pts))
        qn = np.zeros(len(pts), dtype=np.int64)
        while len(qp):
            keep = self.box_distance(pts[qp], qn) <= best[qp]
            qp, qn = qp[keep], qn[keep]
            leaf = self.left[qn] < 0
            if leaf.any():
                lp, ln = qp[leaf], qn[leaf]
                counts = self.stop[ln] - self.start[ln]
                rp = np.repeat(lp, counts)
                offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
                rt = self.order[np.repeat(self.start[ln], counts) + offs]
                t = self.tri[rt]
                d = point_triangle_distance(pts[rp], t[:, 0], t[:, 1], t[:, 2])
                np.minimum.at(exact, rp, d)
                np.minimum.at(best, rp, d)
            inner = ~leaf
            qp = np.concatenate([qp[inner], qp[inner]])
            qn = np.concatenate([self.left[qn[inner]], self.right[qn[inner]]])
        return exact


def surface_distances(points, mesh: TriangleMesh, bvh: Bvh | None = None) -> np.ndarray:
    _check(mesh)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros(0)
    bvh = bvh if bvh is not None else Bvh.build(mesh)
    # the nearest vertex bounds the nearest surface point from above
    upper, _ = cKDTree(mesh.vertices).query(pts)
    return bvh.distances(pts, upper)


def point_to_surface(points, mesh: TriangleMesh) -> float:
    """Mean exact distance from the points to the mesh surface."""
    return float(np.mean(surface_distances(points, mesh)))


# --------------------------------------------------------------------------
# Chamfer
# --------------------------------------------------------------------------

def sample_surface(mesh: TriangleMesh, n: int, rng: Rng) -> np.ndarray:
    """Area-uniform samples on the mesh."""
    _check(mesh)
    gen = rng.generator
    areas = mesh.areas()
    tri = gen.choice(len(areas), size=n, p=areas / areas.sum())
    u, v = gen.random(n), gen.random(n)
    su = np.sqrt(u)
    corners = mesh.vertices[mesh.triangles[tri]]
    return (
        (1 - su)[:, None] * corners[:, 0]
        + (su * (1 - v))[:, None] * corners[:, 1]
        + (su * v)[:, None] * corners[:, 2]
    )


def chamfer_from_samples(samples_a, mesh_a, samples_b, mesh_b) -> float:
    return 0.5 * (point_to_surface(samples_a, mesh_b) + point_to_surface(samples_b, mesh_a))


def chamfer(mesh_a: TriangleMesh, mesh_b: TriangleMesh, n_samples: int, rng: Rng) -> float:
    """Half the sum of the two directed mean sample-to-surface distances."""
    _check(mesh_a)
    _check(mesh_b)
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    sa = sample_surface(mesh_a, n_samples, rng.child(0))
    sb = sample_surface(mesh_b, n_samples, rng.child(1))
    return chamfer_from_samples(sa, mesh_a, sb, mesh_b)


# --------------------------------------------------------------------------
# Normal images
# --------------------------------------------------------------------------

def map_difference(a, b, union: bool = True) -> float:
    """Mean |n_a - n_b| over the union (or intersection) of the masks.

    Outside its own mask a map's normal is the zero vector, so silhouette
    mismatch under the union rule costs the full normal length."""
    mask = (a.mask | b.mask) if union else (a.mask & b.mask)
    if not mask.any():
        return 0.0
    return float(np.mean(np.linalg.norm(a.normals[mask] - b.normals[mask], axis=1)))


def normal_error(mesh_a, mesh_b, views=CANONICAL_VIEWS, w: int = 128, h: int = 128, union: bool = True):
    """Mean over views of the per-view normal-image error.

    Returns (mean, {view: error})."""
    _check(mesh_a)
    _check(mesh_b)
    per_view = {}
    for v in views:
        per_view[int(v) % 360] = map_difference(
            rasterize_normal_map(mesh_a, v, w, h), rasterize_normal_map(mesh_b, v, w, h), union
        )
    return float(np.mean(list(per_view.values()))), per_view


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

@dataclass
class MetricReport:
    chamfer: float
    p2s: float
    normal_error: float
    side_normal_error: float
    per_view: dict = field(default_factory=dict)
    normal_error_intersection: float = 0.0
    side_normal_error_intersection: float = 0.0

    COLUMNS = (
        "chamfer", "p2s", "normal_error", "side_normal_error",
        "normal_error_intersection", "side_normal_error_intersection",
    )

    def row(self) -> dict:
        out = {c: getattr(self, c) for c in self.COLUMNS}
        for v, e in sorted(self.per_view.items()):
            out[f"normal_view_{v}"] = e
        return out

    def to_csv(self, header: str = "") -> str:
        buf = io.StringIO()
        if header:
            buf.write(f"# {header}\n")
        row = self.row()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(row))
        w.writerow([repr(float(v)) for v in row.values()])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [
            f"chamfer            {self.chamfer:.6f}",
            f"p2s                {self.p2s:.6f}",
            f"normal error       {self.normal_error:.6f} (union mask)",
            f"side normal error  {self.side_normal_error:.6f} (union mask)",
            f"normal error       {self.normal_error_intersection:.6f} (mask intersection)",
            f"side normal error  {self.side_normal_error_intersection:.6f} (mask intersection)",
        ]
        lines += [f"  view {v:3d}: {e:.6f}" for v, e in sorted(self.per_view.items())]
        return "\n".join(lines) + "\n"


def evaluate(recon: TriangleMesh, truth: TriangleMesh, rng: Rng, n_samples: int = 10000,
             views=CANONICAL_VIEWS, w: int = 128, h: int = 128) -> MetricReport:
    """All metrics of ``recon`` against ``truth``. P2S runs from samples of
    the reconstruction to the true surface."""
    _check(recon)
    _check(truth)
    sr = sample_surface(recon, n_samples, rng.child(0))
    st = sample_surface(truth, n_samples, rng.child(1))
    d_rt = point_to_surface(sr, truth)
    cham = 0.5 * (d_rt + point_to_surface(st, recon))
    maps = {}
    for v in views:
        maps[int(v) % 360] = (rasterize_normal_map(recon, v, w, h), rasterize_normal_map(truth, v, w, h))
    per_view = {v: map_difference(a, b) for v, (a, b) in maps.items()}
    per_view_i = {v: map_difference(a, b, union=False) for v, (a, b) in maps.items()}
    sides = [v for v in per_view if v in SIDE_VIEWS]
    return MetricReport(
        chamfer=cham,
        p2s=d_rt,
        normal_error=float(np.mean(list(per_view.values()))),
        side_normal_error=float(np.mean([per_view[v] for v in sides])) if sides else 0.0,
        per_view=per_view,
        normal_error_intersection=float(np.mean(list(per_view_i.values()))),
        side_normal_error_intersection=float(np.mean([per_view_i[v] for v in sides])) if sides else 0.0,
    )
