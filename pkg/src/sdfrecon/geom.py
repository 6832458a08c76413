"""Analytic signed-distance shapes, point sampling and seeded randomness.

Every shape evaluates batched points of shape ``(N, 3)``. Distances are
negative inside. Primitives return exact distances; smooth unions return a
lower bound.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DOMAIN_MIN = -1.0
DOMAIN_MAX = 1.0

NEAR_SURFACE = 0
UNIFORM = 1

_TINY = 1e-12


class SingularPoint(ValueError):
    """The SDF gradient vanishes (or is undefined) at the query point."""


def as_points(p) -> np.ndarray:
    pts = np.asarray(p, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.shape[-1] != 3:
        raise ValueError(f"expected points with 3 coordinates, got shape {pts.shape}")
    return pts


def yaw_matrix(degrees: float) -> np.ndarray:
    """Rotation about the vertical (+y) axis."""
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    # snap canonical angles so 90 degree rotations are exact
    c, s = np.round(c, 15), np.round(s, 15)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


class AnalyticSdf:
    """Base class: subclasses implement ``value`` and ``gradient``."""

    def value(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, p: np.ndarray) -> np.ndarray:
        """Unnormalized analytic gradient (unit length for exact SDFs)."""
        raise NotImplementedError

    def __call__(self, p) -> np.ndarray:
        return self.value(as_points(p))


@dataclass(frozen=True)
class Sphere(AnalyticSdf):
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.5

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")

    def value(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius

    def gradient(self, p):
        d = p - np.asarray(self.center)
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        return np.where(n > 0, d / np.where(n > 0, n, 1.0), 0.0)


@dataclass(frozen=True)
class Capsule(AnalyticSdf):
    a: tuple
    b: tuple
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("capsule radius must be positive")

    def _closest_on_axis(self, p):
        a = np.asarray(self.a, dtype=np.float64)
        ab = np.asarray(self.b, dtype=np.float64) - a
        denom = float(ab @ ab)
        if denom == 0.0:
            t = np.zeros(len(p))
        else:
            t = np.clip((p - a) @ ab / denom, 0.0, 1.0)
        return a + t[:, None] * ab

    def value(self, p):
        return np.linalg.norm(p - self._closest_on_axis(p), axis=-1) - self.radius

    def gradient(self, p):
        d = p - self._closest_on_axis(p)
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        return np.where(n > 0, d / np.where(n > 0, n, 1.0), 0.0)


@dataclass(frozen=True)
class Box(AnalyticSdf):
    center: tuple
    half_extents: tuple

    def __post_init__(self):
        if min(self.half_extents) <= 0:
            raise ValueError("box half extents must be positive")

    def value(self, p):
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def gradient(self, p):
        d = p - np.asarray(self.center)
        sgn = np.where(d >= 0, 1.0, -1.0)
        q = np.abs(d) - np.asarray(self.half_extents)
        qpos = np.maximum(q, 0.0)
        out_len = np.linalg.norm(qpos, axis=-1, keepdims=True)
        outside = sgn * qpos / np.maximum(out_len, _TINY)
        axis = np.argmax(q, axis=-1)
        inside = np.zeros_like(p)
        inside[np.arange(len(p)), axis] = sgn[np.arange(len(p)), axis]
        return np.where(out_len > 0, outside, inside)


@dataclass(frozen=True)
class Torus(AnalyticSdf):
    """Ring in the xz-plane around ``center``; the symmetry axis is +y."""

    center: tuple
    major_r: float
    minor_r: float

    def __post_init__(self):
        if self.major_r <= 0 or self.minor_r <= 0:
            raise ValueError("torus radii must be positive")

    def _q(self, p):
        d = p - np.asarray(self.center)
        rho = np.hypot(d[:, 0], d[:, 2])
        return d, rho, np.stack([rho - self.major_r, d[:, 1]], axis=-1)

    def value(self, p):
        _, _, q = self._q(p)
        return np.linalg.norm(q, axis=-1) - self.minor_r

    def gradient(self, p):
        d, rho, q = self._q(p)
        qn = np.linalg.norm(q, axis=-1)
        safe_rho = np.where(rho > 0, rho, 1.0)
        safe_qn = np.where(qn > 0, qn, 1.0)
        g = np.stack(
            [q[:, 0] * d[:, 0] / safe_rho, q[:, 1], q[:, 0] * d[:, 2] / safe_rho], axis=-1
        ) / safe_qn[:, None]
        bad = (rho == 0) | (qn == 0)
        g[bad] = 0.0
        return g


@dataclass(frozen=True)
class Union(AnalyticSdf):
    children: tuple

    def __post_init__(self):
        if not self.children:
            raise ValueError("union needs at least one child")

    def value(self, p):
        return np.min([c.value(p) for c in self.children], axis=0)

    def gradient(self, p):
        vals = np.stack([c.value(p) for c in self.children])
        grads = np.stack([c.gradient(p) for c in self.children])
        pick = np.argmin(vals, axis=0)
        return grads[pick, np.arange(len(p))]


@dataclass(frozen=True)
class SmoothUnion(AnalyticSdf):
    """Exponential smooth-min: ``-k * log(sum(exp(-d_i / k)))``."""

    children: tuple
    blend_k: float

    def __post_init__(self):
        if not self.children:
            raise ValueError("smooth union needs at least one child")
        if self.blend_k <= 0:
            raise ValueError("blend_k must be positive")

    def _weights(self, vals):
        z = -vals / self.blend_k
        zmax = z.max(axis=0)
        e = np.exp(z - zmax)
        s = e.sum(axis=0)
        return e / s, zmax + np.log(s)

    def value(self, p):
        vals = np.stack([c.value(p) for c in self.children])
        _, lse = self._weights(vals)
        return -self.blend_k * lse

    def gradient(self, p):
        vals = np.stack([c.value(p) for c in self.children])
        grads = np.stack([c.gradient(p) for c in self.children])
        w, _ = self._weights(vals)
        return np.einsum("cn,cnk->nk", w, grads)


@dataclass(frozen=True)
class Translate(AnalyticSdf):
    child: AnalyticSdf
    offset: tuple

    def value(self, p):
        return self.child.value(p - np.asarray(self.offset))

    def gradient(self, p):
        return self.child.gradient(p - np.asarray(self.offset))


@dataclass(frozen=True)
class Scale(AnalyticSdf):
    child: AnalyticSdf
    factor: float

    def __post_init__(self):
        if self.factor <= 0:
            raise ValueError("scale factor must be positive")

    def value(self, p):
        return self.factor * self.child.value(p / self.factor)

    def gradient(self, p):
        return self.child.gradient(p / self.factor)


@dataclass(frozen=True)
class Rotate(AnalyticSdf):
    """Rotate the child by ``yaw`` degrees about +y."""

    child: AnalyticSdf
    yaw: float

    def value(self, p):
        r = yaw_matrix(self.yaw)
        return self.child.value(p @ r)

    def gradient(self, p):
        r = yaw_matrix(self.yaw)
        return self.child.gradient(p @ r) @ r.T


@dataclass(frozen=True)
class Offset(AnalyticSdf):
    """Shift the level set: positive ``amount`` erodes the shape."""

    child: AnalyticSdf
    amount: float

    def value(self, p):
        return self.child.value(p) + self.amount

    def gradient(self, p):
        return self.child.gradient(p)


def eval_analytic(shape: AnalyticSdf, p) -> np.ndarray | float:
    """Signed distance of ``p``; a scalar for a single point."""
    pts = np.asarray(p, dtype=np.float64)
    out = shape.value(as_points(pts))
    return float(out[0]) if pts.ndim == 1 else out


def analytic_normals(shape: AnalyticSdf, points) -> tuple[np.ndarray, np.ndarray]:
    """Batched unit normals plus a validity mask (False at singular points)."""
    g = shape.gradient(as_points(points))
    n = np.linalg.norm(g, axis=-1)
    valid = n >= 1e-9
    out = np.zeros_like(g)
    out[valid] = g[valid] / n[valid, None]
    return out, valid


def analytic_normal(shape: AnalyticSdf, p) -> np.ndarray:
    """Unit outward normal at a single point.

    Raises:
        SingularPoint: if the gradient magnitude is below 1e-9.
    """
    n, valid = analytic_normals(shape, p)
    if not valid.all():
        raise SingularPoint(f"gradient vanishes at {np.asarray(p).tolist()}")
    return n[0] if np.asarray(p).ndim == 1 else n


class Rng:
    """Seeded random stream with deterministic child streams.

    Children are keyed by integers, so work split across shards draws the
    same numbers as a serial loop over the same keys.
    """

    def __init__(self, seed: int, _key: tuple = ()):
        self.seed = int(seed)
        self._key = tuple(_key)
        self._counter = 0
        self.generator = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self._key))
        )

    def child(self, *key: int) -> "Rng":
        return Rng(self.seed, self._key + tuple(int(k) for k in key))

    def spawn(self) -> "Rng":
        """Next child in sequence (advances the internal counter)."""
        self._counter += 1
        return self.child(self._counter)

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self._key})"


@dataclass
class SampleBatch:
    points: np.ndarray
    gt_sdf: np.ndarray
    provenance: np.ndarray = field(default=None)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.gt_sdf = np.asarray(self.gt_sdf, dtype=np.float64)
        if self.provenance is None:
            self.provenance = np.full(len(self.points), UNIFORM, dtype=np.int8)
        if len(self.points) == 0:
            raise ValueError("sample batch must be nonempty")
        if len(self.gt_sdf) != len(self.points) or len(self.provenance) != len(self.points):
            raise ValueError("points, gt_sdf and provenance lengths differ")

    def __len__(self):
        return len(self.points)

    def permuted(self, order: np.ndarray) -> "SampleBatch":
        return SampleBatch(self.points[order], self.gt_sdf[order], self.provenance[order])


def project_to_surface(shape: AnalyticSdf, p: np.ndarray, iters: int = 8) -> np.ndarray:
    """Newton-style projection ``p - d * n`` repeated; exact in one step for SDFs."""
    q = p.copy()
    for _ in range(iters):
        d = shape.value(q)
        n, valid = analytic_normals(shape, q)
        q = q - np.where(valid[:, None], d[:, None] * n, 0.0)
    return q


def surface_points(shape: AnalyticSdf, rng: Rng, n: int, tol: float = 1e-6) -> np.ndarray:
    """Roughly spread points on the zero level set by projecting uniform draws."""
    gen = rng.generator
    out = []
    have = 0
    while have < n:
        need = max(2 * (n - have), 64)
        cand = gen.uniform(DOMAIN_MIN, DOMAIN_MAX, size=(need, 3))
        q = project_to_surface(shape, cand)
        ok = (np.abs(shape.value(q)) < tol) & np.all(np.abs(q) <= DOMAIN_MAX, axis=-1)
        out.append(q[ok])
        have += int(ok.sum())
    return np.concatenate(out)[:n]


def sample_batch(
    target: AnalyticSdf, rng: Rng, n_near: int, n_uniform: int, sigma: float
) -> SampleBatch:
    """Near-surface points (projected, then jittered by N(0, sigma^2)) plus
    uniform points in the domain, labelled with exact target distances."""
    if n_near + n_uniform <= 0:
        raise ValueError("need at least one sample")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    near_rng, jitter_rng, uni_rng = rng.child(0), rng.child(1), rng.child(2)
    parts, tags = [], []
    if n_near:
        surf = surface_points(target, near_rng, n_near)
        near = surf + jitter_rng.generator.normal(0.0, sigma, size=surf.shape)
        parts.append(np.clip(near, DOMAIN_MIN, DOMAIN_MAX))
        tags.append(np.full(n_near, NEAR_SURFACE, dtype=np.int8))
    if n_uniform:
        parts.append(uni_rng.generator.uniform(DOMAIN_MIN, DOMAIN_MAX, size=(n_uniform, 3)))
        tags.append(np.full(n_uniform, UNIFORM, dtype=np.int8))
    pts = np.concatenate(parts)
    return SampleBatch(pts, target.value(pts), np.concatenate(tags))


# --------------------------------------------------------------------------
# Built-in scenes
# --------------------------------------------------------------------------

def capsule_person(
    inflate: float = 0.0,
    blend_k: float | None = 0.03,
    arm_spread: float = 0.0,
    leg_spread: float = 0.0,
    torso_r: float = 0.19,
) -> AnalyticSdf:
    """A standing figure built from capsules, fitting in the domain with a
    0.1 margin. ``inflate`` thickens every limb (clothing); ``blend_k=None``
    gives a hard union."""
    r = inflate
    head = Sphere((0.0, 0.68, 0.0), 0.14 + r)
    torso = Capsule((0.0, 0.38, 0.0), (0.0, -0.02, 0.0), torso_r + r)
    arm_l = Capsule((0.24, 0.42, 0.0), (0.42 + arm_spread, 0.02, 0.0), 0.065 + r)
    arm_r = Capsule((-0.24, 0.42, 0.0), (-0.42 - arm_spread, 0.02, 0.0), 0.065 + r)
    leg_l = Capsule((0.1, -0.12, 0.0), (0.14 + leg_spread, -0.76, 0.0), 0.085 + r)
    leg_r = Capsule((-0.1, -0.12, 0.0), (-0.14 - leg_spread, -0.76, 0.0), 0.085 + r)
    parts = (head, torso, arm_l, arm_r, leg_l, leg_r)
    if blend_k is None:
        return Union(parts)
    return SmoothUnion(parts, blend_k)


def capsule_person_scene() -> tuple[AnalyticSdf, AnalyticSdf]:
    """(target, prior): a 'clothed' blended figure and a thinner hard-union
    'body' prior standing in for a parametric body fit."""
    return capsule_person(inflate=0.035, blend_k=0.03), capsule_person(inflate=0.0, blend_k=None)


def person_variants(rng: Rng, count: int) -> list[AnalyticSdf]:
    """Held-out figures with perturbed proportions, used as the real-map pool."""
    out = []
    for i in range(count):
        g = rng.child(i).generator
        out.append(
            capsule_person(
                inflate=float(g.uniform(0.01, 0.06)),
                blend_k=float(g.uniform(0.02, 0.05)),
                arm_spread=float(g.uniform(-0.05, 0.08)),
                leg_spread=float(g.uniform(-0.03, 0.05)),
                torso_r=float(g.uniform(0.16, 0.21)),
            )
        )
    return out


def bounding_box(shape: AnalyticSdf, res: int = 96) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned bounds of the interior estimated on a lattice."""
    lin = np.linspace(DOMAIN_MIN, DOMAIN_MAX, res)
    grid = np.stack(np.meshgrid(lin, lin, lin, indexing="ij"), axis=-1).reshape(-1, 3)
    inside = grid[shape.value(grid) <= 0]
    if len(inside) == 0:
        raise ValueError("shape has no interior on the lattice")
    return inside.min(axis=0), inside.max(axis=0)


def points_in_domain(points: Sequence) -> bool:
    p = as_points(points)
    return bool(np.all((p >= DOMAIN_MIN) & (p <= DOMAIN_MAX)))
