"""Normal-map rendering (ray marching and rasterization) and Marching Cubes.

The ray-marched path is the differentiable one: hit points are held fixed
and gradients flow only through the stencil normal at each hit.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage.measure import marching_cubes as _skimage_mc

from sdfrecon.geom import DOMAIN_MAX, DOMAIN_MIN, AnalyticSdf
from sdfrecon.m2o import ANALYTIC, StencilConfig, derivative_backprop, field_derivatives, m2o_gradient
from sdfrecon.normalmap import NormalMap, pixel_centers, view_matrix

MAX_STEPS = 256
MIN_STEP = 1e-3
MAX_STEP = 0.05
STEP_SCALE = 0.8
HIT_TOL = 1e-4
REFINE_ITERS = 40


class EmptySurface(RuntimeError):
    """The field has no zero crossing on the extraction lattice."""


def _values(field, pts):
    return np.asarray(field.value(pts) if hasattr(field, "value") else field(pts), dtype=np.float64)


@dataclass
class RenderResult:
    normal_map: NormalMap
    view: int
    hits: np.ndarray  # (M, 3) world-space hit points
    pixels: np.ndarray  # (M,) flat pixel indices
    gradients: np.ndarray  # (M, 3) unnormalized world-space gradients


def _march(field, origins, direction):
    """Return per-ray hit parameter t (nan on miss)."""
    n = len(origins)
    t_hit = np.full(n, np.nan)
    t = np.zeros(n)
    prev_t = np.zeros(n)
    prev_v = np.full(n, np.nan)
    active = np.arange(n)
    bracket_lo, bracket_hi, v_lo, v_hi, bracket_ids = [], [], [], [], []
    for _ in range(MAX_STEPS):
        if len(active) == 0:
            break
        v = _values(field, origins[active] + t[active, None] * direction)
        hit = np.abs(v) < HIT_TOL
        crossed = (v < 0) & ~hit & np.isfinite(prev_v[active])
        start_inside = (v < 0) & ~hit & ~np.isfinite(prev_v[active])
        t_hit[active[hit]] = t[active[hit]]
        if crossed.any():
            ids = active[crossed]
            bracket_ids.append(ids)
            bracket_lo.append(prev_t[ids])
            bracket_hi.append(t[ids])
            v_lo.append(prev_v[ids])
            v_hi.append(v[crossed])
        go = ~(hit | crossed | start_inside)
        ids = active[go]
        prev_t[ids] = t[ids]
        prev_v[ids] = v[go]
        t[ids] += np.clip(STEP_SCALE * v[go], MIN_STEP, MAX_STEP)
        active = ids[t[ids] <= 2.0]
    if bracket_ids:
        ids = np.concatenate(bracket_ids)
        t_hit[ids] = _refine(
            field, origins[ids], direction,
            np.concatenate(bracket_lo), np.concatenate(bracket_hi),
            np.concatenate(v_lo), np.concatenate(v_hi),
        )
    return t_hit


def _refine(field, origins, direction, a, b, fa, fb):
    """Illinois regula falsi on brackets with fa > 0 > fb."""
    out = np.full(len(a), np.nan)
    todo = np.arange(len(a))
    side = np.zeros(len(a), dtype=np.int8)
    for _ in range(REFINE_ITERS):
        if len(todo) == 0:
            break
        c = (a[todo] * fb[todo] - b[todo] * fa[todo]) / (fb[todo] - fa[todo])
        fc = _values(field, origins[todo] + c[:, None] * direction)
        done = np.abs(fc) < HIT_TOL
        out[todo[done]] = c[done]
        pos = fc > 0
        upd = todo[pos]
        a[upd], fa[upd] = c[pos], fc[pos]
        fb[upd] = np.where(side[upd] == 1, fb[upd] * 0.5, fb[upd])
        side[upd] = 1
        upd = todo[~pos]
        b[upd], fb[upd] = c[~pos], fc[~pos]
        fa[upd] = np.where(side[upd] == -1, fa[upd] * 0.5, fa[upd])
        side[upd] = -1
        todo = todo[~done]
    return out


def _hit_gradients(field, hits, cfg: StencilConfig):
    if len(hits) == 0:
        return np.zeros((0, 3))
    if cfg.mode == ANALYTIC:
        if isinstance(field, AnalyticSdf):
            return field.gradient(hits)
        return field_derivatives(field, hits, cfg)[1]
    return m2o_gradient(field, hits, cfg)


def render_field(field, view, w: int, h: int, cfg: StencilConfig) -> RenderResult:
    """Orthographic ray marching of the zero level set from one view."""
    R = view_matrix(view)
    xs, ys = pixel_centers(w, h)
    view_origins = np.stack([xs.ravel(), ys.ravel(), np.full(xs.size, DOMAIN_MAX)], axis=1)
    origins = view_origins @ R  # view -> world
    direction = np.array([0.0, 0.0, -1.0]) @ R
    t_hit = _march(field, origins, direction)
    pix = np.flatnonzero(np.isfinite(t_hit))
    hits = origins[pix] + t_hit[pix, None] * direction
    grads = _hit_gradients(field, hits, cfg)
    norms = np.linalg.norm(grads, axis=1)
    keep = norms > 1e-12
    pix, hits, grads, norms = pix[keep], hits[keep], grads[keep], norms[keep]
    normals = np.zeros((h * w, 3))
    normals[pix] = (grads / norms[:, None]) @ R.T
    mask = np.zeros(h * w, dtype=bool)
    mask[pix] = True
    nmap = NormalMap(normals.reshape(h, w, 3), mask.reshape(h, w))
    return RenderResult(nmap, int(view) % 360, hits, pix, grads)


def raymarch_normal_map(field, view, w: int, h: int, cfg: StencilConfig) -> NormalMap:
    return render_field(field, view, w, h, cfg).normal_map


def raymarch_backprop(field, view, w: int, h: int, cfg: StencilConfig, upstream, rendered: RenderResult | None = None):
    """Parameter gradient of ``sum(upstream * normals)`` with hit points frozen.

    Pass ``rendered`` to reuse the hits of an earlier render."""
    if rendered is None:
        rendered = render_field(field, view, w, h, cfg)
    up = np.asarray(upstream, dtype=np.float64).reshape(-1, 3)
    if len(up) != w * h:
        raise ValueError("upstream must be (h, w, 3)")
    if len(rendered.pixels) == 0:
        return field.zero_gradient()
    R = view_matrix(view)
    u_world = up[rendered.pixels] @ R
    g = rendered.gradients
    norm = np.linalg.norm(g, axis=1, keepdims=True)
    n = g / norm
    u_grad = (u_world - n * np.sum(n * u_world, axis=1, keepdims=True)) / norm
    m = len(g)
    return derivative_backprop(field, rendered.hits, np.zeros(m), u_grad, np.zeros((m, 3)), cfg)


# --------------------------------------------------------------------------
# Meshes
# --------------------------------------------------------------------------

@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (T, 3) int
    normals: np.ndarray | None = None  # (V, 3)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if self.normals is None:
            self.normals = vertex_normals(self.vertices, self.triangles)

    def __len__(self):
        return len(self.triangles)

    def face_normals(self) -> np.ndarray:
        """Unnormalized (twice-area) face normals by right-hand winding."""
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)

    def signed_volume(self) -> float:
        v = self.vertices[self.triangles]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)

    def transformed(self, matrix: np.ndarray) -> "TriangleMesh":
        """Apply a rotation to vertices and normals."""
        return TriangleMesh(self.vertices @ matrix.T, self.triangles, self.normals @ matrix.T)

    def flipped(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.triangles[:, ::-1], -self.normals)

    def edge_use_counts(self) -> np.ndarray:
        t = self.triangles
        edges = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return counts

    def is_watertight(self) -> bool:
        return len(self) > 0 and bool(np.all(self.edge_use_counts() == 2))


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    out = np.zeros_like(vertices)
    if len(triangles):
        v = vertices[triangles]
        fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        for k in range(3):
            np.add.at(out, triangles[:, k], fn)
    n = np.linalg.norm(out, axis=1, keepdims=True)
    return np.where(n > 0, out / np.where(n > 0, n, 1.0), 0.0)


def sample_lattice(field, resolution: int) -> np.ndarray:
    lin = np.linspace(DOMAIN_MIN, DOMAIN_MAX, resolution)
    grid = np.stack(np.meshgrid(lin, lin, lin, indexing="ij"), axis=-1).reshape(-1, 3)
    return _values(field, grid).reshape((resolution,) * 3)


def marching_cubes(field, resolution: int) -> TriangleMesh:
    """Zero isosurface on a resolution^3 lattice over [-1, 1]^3.

    Faces are wound so their normals point toward increasing field values.
    """
    if resolution < 16:
        raise ValueError("resolution must be at least 16")
    return mesh_from_volume(sample_lattice(field, resolution))


def mesh_from_volume(volume: np.ndarray) -> TriangleMesh:
    res = volume.shape[0]
    if not (volume.min() < 0 < volume.max()):
        raise EmptySurface("field has no sign change on the lattice")
    spacing = (DOMAIN_MAX - DOMAIN_MIN) / (res - 1)
    # 'ascent' winds faces toward increasing values
    verts, faces, _, _ = _skimage_mc(
        volume, level=0.0, spacing=(spacing,) * 3, gradient_direction="ascent",
        allow_degenerate=False, method="lewiner",
    )
    verts = verts.astype(np.float64) + DOMAIN_MIN
    faces = faces.astype(np.int64)[:, ::-1]
    if len(faces) == 0:
        raise EmptySurface("no triangles extracted")
    # canonical vertex and face order, so f and -f give the same indices
    order = np.lexsort((verts[:, 2], verts[:, 1], verts[:, 0]))
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    return TriangleMesh(verts[order], canonical_faces(remap[faces]))


def canonical_faces(faces: np.ndarray) -> np.ndarray:
    """Rotate each face to start at its smallest index (winding kept), then
    sort faces lexicographically."""
    faces = np.asarray(faces, dtype=np.int64)
    shift = np.argmin(faces, axis=1)
    idx = (shift[:, None] + np.arange(3)) % 3
    rolled = np.take_along_axis(faces, idx, axis=1)
    return rolled[np.lexsort(rolled.T[::-1])]


def write_obj(path: str | Path, mesh: TriangleMesh) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"vn {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.normals]
    lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in mesh.triangles + 1]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path: str | Path) -> TriangleMesh:
    verts, norms, faces = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(v) for v in parts[1:4]])
        elif parts[0] == "vn":
            norms.append([float(v) for v in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriangleMesh(np.array(verts), np.array(faces), np.array(norms) if norms else None)


# --------------------------------------------------------------------------
# Rasterization
# --------------------------------------------------------------------------

_TRI_CHUNK = 4096


def rasterize_normal_map(mesh: TriangleMesh, view, w: int, h: int) -> NormalMap:
    """Orthographic depth-buffered fill with interpolated vertex normals.

    Ties at equal depth go to the lower triangle index.
    """
    R = view_matrix(view)
    if len(mesh) == 0:
        return NormalMap.empty(w, h)
    vv = mesh.vertices @ R.T
    nv = mesh.normals @ R.T
    # continuous pixel coordinates (column u, row v) of every vertex
    pu = (vv[:, 0] + 1.0) * w / 2.0 - 0.5
    pv = (1.0 - vv[:, 1]) * h / 2.0 - 0.5
    best_depth = np.full(h * w, -np.inf)
    best_tri = np.full(h * w, -1, dtype=np.int64)
    best_bary = np.zeros((h * w, 3))
    for start in range(0, len(mesh), _TRI_CHUNK):
        tri = mesh.triangles[start : start + _TRI_CHUNK]
        cand = _candidates(tri, pu, pv, vv[:, 2], w, h, start)
        if cand is None:
            continue
        pix, tid, depth, bary = cand
        # closest first, then lowest index; keep the first per pixel
        order = np.lexsort((tid, -depth, pix))
        pix, tid, depth, bary = pix[order], tid[order], depth[order], bary[order]
        first = np.ones(len(pix), dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        pix, tid, depth, bary = pix[first], tid[first], depth[first], bary[first]
        # chunks arrive in index order, so an equal depth keeps the earlier triangle
        better = depth > best_depth[pix]
        pix, tid, depth, bary = pix[better], tid[better], depth[better], bary[better]
        best_depth[pix] = depth
        best_tri[pix] = tid
        best_bary[pix] = bary
    covered = np.flatnonzero(best_tri >= 0)
    tv = mesh.triangles[best_tri[covered]]
    n = np.einsum("mk,mkc->mc", best_bary[covered], nv[tv])
    length = np.linalg.norm(n, axis=1)
    ok = length > 1e-12
    normals = np.zeros((h * w, 3))
    normals[covered[ok]] = n[ok] / length[ok, None]
    mask = np.zeros(h * w, dtype=bool)
    mask[covered[ok]] = True
    return NormalMap(normals.reshape(h, w, 3), mask.reshape(h, w))


def _candidates(tri, pu, pv, pz, w, h, offset):
    u = pu[tri]
    v = pv[tri]
    u0 = np.maximum(np.ceil(u.min(axis=1) - 1e-9), 0).astype(np.int64)
    u1 = np.minimum(np.floor(u.max(axis=1) + 1e-9), w - 1).astype(np.int64)
    v0 = np.maximum(np.ceil(v.min(axis=1) - 1e-9), 0).astype(np.int64)
    v1 = np.minimum(np.floor(v.max(axis=1) + 1e-9), h - 1).astype(np.int64)
    nu = np.maximum(u1 - u0 + 1, 0)
    nv = np.maximum(v1 - v0 + 1, 0)
    area2 = (u[:, 1] - u[:, 0]) * (v[:, 2] - v[:, 0]) - (u[:, 2] - u[:, 0]) * (v[:, 1] - v[:, 0])
    counts = np.where(np.abs(area2) > 1e-12, nu * nv, 0)
    total = int(counts.sum())
    if total == 0:
        return None
    t_local = np.repeat(np.arange(len(tri)), counts)
    within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    cols = u0[t_local] + within % nu[t_local]
    rows = v0[t_local] + within // nu[t_local]
    uu, vv_ = u[t_local], v[t_local]
    a = area2[t_local]
    # edge functions opposite each vertex, normalized to barycentrics
    b0 = ((uu[:, 1] - cols) * (vv_[:, 2] - rows) - (uu[:, 2] - cols) * (vv_[:, 1] - rows)) / a
    b1 = ((uu[:, 2] - cols) * (vv_[:, 0] - rows) - (uu[:, 0] - cols) * (vv_[:, 2] - rows)) / a
    b2 = 1.0 - b0 - b1
    bary = np.stack([b0, b1, b2], axis=1)
    inside = np.all(bary >= -1e-9, axis=1)
    bary = np.clip(bary[inside], 0.0, 1.0)
    bary /= bary.sum(axis=1, keepdims=True)
    t_local = t_local[inside]
    depth = np.einsum("mk,mk->m", bary, pz[tri[t_local]])
    pix = rows[inside] * w + cols[inside]
    return pix, t_local + offset, depth, bary
