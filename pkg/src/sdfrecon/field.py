"""Prior-conditioned implicit field: features, MLP, and exact parameter gradients.

A point's feature vector is::

    [prior_sdf | prior_normal (3) | projected_normal (3) | voxel_feat (F) | xyz (3)]

so ``D = 10 + F``. The MLP maps it to a signed distance with softplus
hidden layers and a linear output.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from sdfrecon.geom import AnalyticSdf, Rng, analytic_normals, as_points
from sdfrecon.normalmap import NormalMap

FEATURE_BASE = 10
# front/back blend width in units of the prior normal's z component
FACING_BAND = 0.25
JET_STEP = 1e-4
_CHUNK = 32768


class ShapeMismatch(ValueError):
    pass


@dataclass
class PriorScene:
    prior_shape: AnalyticSdf
    voxel_grid: np.ndarray  # (G, G, G, F), nodes at linspace(-1, 1, G)
    front_map: NormalMap
    back_map: NormalMap

    def __post_init__(self):
        g = self.voxel_grid
        if g.ndim != 4 or not (g.shape[0] == g.shape[1] == g.shape[2]):
            raise ValueError("voxel grid must be (G, G, G, F)")
        if g.shape[0] < 8 or g.shape[3] < 4:
            raise ValueError("voxel grid needs G >= 8 and F >= 4")
        if self.front_map.mask.shape != self.back_map.mask.shape:
            raise ValueError("front and back maps must have identical dimensions")

    @property
    def channels(self) -> int:
        return self.voxel_grid.shape[3]

    @property
    def feature_dim(self) -> int:
        return FEATURE_BASE + self.channels


@dataclass
class FeatureVector:
    prior_sdf: float
    prior_normal: np.ndarray
    prior_normal_valid: bool
    projected_normal: np.ndarray
    projected_valid: bool
    voxel_feat: np.ndarray
    position: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate(
            [[self.prior_sdf], self.prior_normal, self.projected_normal, self.voxel_feat, self.position]
        )


def trilinear_weights(points: np.ndarray, res: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat node indices (N, 8) and weights (N, 8) on a res^3 lattice over [-1, 1]^3."""
    u = np.clip((points + 1.0) * 0.5 * (res - 1), 0.0, res - 1.0)
    i0 = np.minimum(np.floor(u).astype(np.int64), res - 2)
    f = u - i0
    idx = np.empty((len(points), 8), dtype=np.int64)
    w = np.empty((len(points), 8))
    k = 0
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                idx[:, k] = ((i0[:, 0] + dx) * res + (i0[:, 1] + dy)) * res + (i0[:, 2] + dz)
                w[:, k] = wx * wy * wz
                k += 1
    return idx, w


def _facing_weight(nz: np.ndarray) -> np.ndarray:
    t = np.clip((nz + FACING_BAND) / (2 * FACING_BAND), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def projected_normals(scene: PriorScene, points: np.ndarray, prior_nz: np.ndarray):
    """World-space normals looked up in the front (0 deg) and back (180 deg)
    maps, blended by whether the prior normal faces the camera."""
    x, y = points[:, 0], points[:, 1]
    front, cov_f = scene.front_map.sample(x, y)
    # the back view mirrors x; its view-space normals map back via (-x, y, -z)
    back, cov_b = scene.back_map.sample(-x, y)
    back = back * np.array([-1.0, 1.0, -1.0])
    wf = _facing_weight(prior_nz)[:, None]
    value = wf * front + (1.0 - wf) * back
    coverage = wf[:, 0] * cov_f + (1.0 - wf[:, 0]) * cov_b
    return value, coverage > 0


def feature_matrix(scene: PriorScene, points) -> np.ndarray:
    """Batched features of shape (N, D)."""
    pts = as_points(points)
    res = scene.voxel_grid.shape[0]
    prior_sdf = scene.prior_shape.value(pts)
    prior_n, _ = analytic_normals(scene.prior_shape, pts)
    proj, _ = projected_normals(scene, pts, prior_n[:, 2])
    idx, w = trilinear_weights(pts, res)
    flat = scene.voxel_grid.reshape(-1, scene.channels)
    vox = np.einsum("nk,nkf->nf", w, flat[idx])
    return np.concatenate([prior_sdf[:, None], prior_n, proj, vox, pts], axis=1)


def extract_features(scene: PriorScene, p) -> FeatureVector:
    pts = as_points(p)
    feats = feature_matrix(scene, pts)[0]
    prior_n, valid = analytic_normals(scene.prior_shape, pts)
    _, proj_valid = projected_normals(scene, pts, prior_n[:, 2])
    f = scene.channels
    return FeatureVector(
        prior_sdf=float(feats[0]),
        prior_normal=feats[1:4],
        prior_normal_valid=bool(valid[0]),
        projected_normal=feats[4:7],
        projected_valid=bool(proj_valid[0]),
        voxel_feat=feats[7 : 7 + f],
        position=feats[7 + f :],
    )


def _softplus(z):
    out = np.exp(-np.abs(z))
    np.log1p(out, out=out)
    out += np.maximum(z, 0.0)
    return out


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class ParamGradient:
    """Named arrays congruent with ``SdfField.params`` (including ``grid``)."""

    arrays: dict = dc_field(default_factory=dict)

    def __getitem__(self, key):
        return self.arrays[key]

    def __add__(self, other: "ParamGradient") -> "ParamGradient":
        return ParamGradient({k: v + other.arrays[k] for k, v in self.arrays.items()})

    def scaled(self, s: float) -> "ParamGradient":
        return ParamGradient({k: v * s for k, v in self.arrays.items()})

    def max_abs(self) -> float:
        return max(float(np.abs(v).max()) for v in self.arrays.values())

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.arrays.values())


class SdfField:
    """MLP over prior features. ``params`` holds W{i}, b{i} and the voxel
    ``grid``, which is the same array as ``scene.voxel_grid``."""

    def __init__(self, scene: PriorScene, params: dict[str, np.ndarray]):
        self.scene = scene
        self.params = params
        self.params["grid"] = scene.voxel_grid
        self.n_layers = sum(1 for k in params if k.startswith("W"))
        dims = [params["W0"].shape[0]] + [params[f"W{i}"].shape[1] for i in range(self.n_layers)]
        if dims[0] != scene.feature_dim or dims[-1] != 1:
            raise ShapeMismatch(f"layer widths {dims} do not fit feature dim {scene.feature_dim}")
        for i in range(1, self.n_layers):
            if params[f"W{i}"].shape[0] != params[f"W{i - 1}"].shape[1]:
                raise ShapeMismatch("weight shapes do not chain")
        self.eval_count = 0

    @property
    def widths(self) -> list[int]:
        return [self.params["W0"].shape[0]] + [
            self.params[f"W{i}"].shape[1] for i in range(self.n_layers)
        ]

    def copy(self) -> "SdfField":
        scene = copy.copy(self.scene)
        scene.voxel_grid = self.scene.voxel_grid.copy()
        params = {k: v.copy() for k, v in self.params.items() if k != "grid"}
        return SdfField(scene, params)

    def zero_gradient(self) -> ParamGradient:
        return ParamGradient({k: np.zeros_like(v) for k, v in self.params.items()})

    # -- forward ---------------------------------------------------------

    def _mlp(self, x):
        acts = [x]
        zs = []
        a = x
        for i in range(self.n_layers):
            z = a @ self.params[f"W{i}"] + self.params[f"b{i}"]
            zs.append(z)
            a = _softplus(z) if i < self.n_layers - 1 else z
            acts.append(a)
        return acts, zs

    def value(self, points) -> np.ndarray:
        pts = as_points(points)
        out = np.empty(len(pts))
        for s in range(0, len(pts), _CHUNK):
            chunk = pts[s : s + _CHUNK]
            acts, _ = self._mlp(feature_matrix(self.scene, chunk))
            out[s : s + _CHUNK] = acts[-1][:, 0]
        self.eval_count += len(pts)
        return out

    __call__ = value

    # -- parameter gradients ---------------------------------------------

    def _scatter_grid(self, points, d_feat, grad):
        res, f = self.scene.voxel_grid.shape[0], self.scene.channels
        idx, w = trilinear_weights(points, res)
        d_vox = d_feat[:, 7 : 7 + f]
        flat = grad.reshape(-1, f)
        np.add.at(flat, idx.ravel(), (w[:, :, None] * d_vox[:, None, :]).reshape(-1, f))

    def backprop(self, points, upstream) -> ParamGradient:
        pts = as_points(points)
        up = np.asarray(upstream, dtype=np.float64).reshape(-1)
        if len(up) != len(pts):
            raise ShapeMismatch(f"{len(pts)} points but {len(up)} upstream values")
        grad = self.zero_gradient()
        for s in range(0, len(pts), _CHUNK):
            self._backprop_chunk(pts[s : s + _CHUNK], up[s : s + _CHUNK], grad)
        return grad

    def _backprop_chunk(self, pts, up, grad):
        x = feature_matrix(self.scene, pts)
        acts, zs = self._mlp(x)
        self.eval_count += len(pts)
        delta = up[:, None]
        for i in reversed(range(self.n_layers)):
            grad.arrays[f"W{i}"] += acts[i].T @ delta
            grad.arrays[f"b{i}"] += delta.sum(axis=0)
            delta = delta @ self.params[f"W{i}"].T
            if i > 0:
                delta = delta * _sigmoid(zs[i - 1])
        self._scatter_grid(pts, delta, grad.arrays["grid"])

    # -- spatial derivatives without stencils ------------------------------

    def _feature_jet(self, pts, h):
        """Features and their per-axis first/second derivatives (finite
        differences of the cheap feature map; the MLP itself is not sampled)."""
        n = len(pts)
        offs = np.concatenate([[np.zeros(3)], np.eye(3) * h, -np.eye(3) * h])
        allpts = (pts[None, :, :] + offs[:, None, :]).reshape(-1, 3)
        f = feature_matrix(self.scene, allpts).reshape(7, n, -1)
        f0, fp, fm = f[0], f[1:4], f[4:7]
        d1 = np.transpose((fp - fm) / (2 * h), (1, 0, 2))
        d2 = np.transpose((fp + fm - 2 * f0) / (h * h), (1, 0, 2))
        return allpts, f0, d1, d2

    def _jet_forward(self, f0, d1, d2):
        a, da, d2a = f0, d1, d2
        cache = []
        for i in range(self.n_layers):
            W, b = self.params[f"W{i}"], self.params[f"b{i}"]
            z = a @ W + b
            dz = da @ W
            d2z = d2a @ W
            cache.append((a, da, d2a, z, dz, d2z))
            if i < self.n_layers - 1:
                s1 = _sigmoid(z)
                s2 = s1 * (1.0 - s1)
                a = _softplus(z)
                da = s1[:, None, :] * dz
                d2a = s2[:, None, :] * dz * dz + s1[:, None, :] * d2z
            else:
                a, da, d2a = z, dz, d2z
        return a[:, 0], da[:, :, 0], d2a[:, :, 0], cache

    def jet(self, points, h: float = JET_STEP):
        """Value, gradient (N, 3) and per-axis second derivatives (N, 3).

        Exactly one MLP evaluation per point; feature derivatives fall back
        to differences with step ``h`` where no closed form is available.
        """
        pts = as_points(points)
        _, f0, d1, d2 = self._feature_jet(pts, h)
        v, g, s, _ = self._jet_forward(f0, d1, d2)
        self.eval_count += len(pts)
        return v, g, s

    def jet_backprop(self, points, u_value, u_grad, u_second, h: float = JET_STEP) -> ParamGradient:
        """Parameter gradient of ``sum(u_value*v + u_grad.g + u_second.s)``."""
        pts = as_points(points)
        n = len(pts)
        allpts, f0, d1, d2 = self._feature_jet(pts, h)
        _, _, _, cache = self._jet_forward(f0, d1, d2)
        self.eval_count += n
        grad = self.zero_gradient()
        Ua = np.asarray(u_value, dtype=np.float64).reshape(n, 1)
        Uda = np.asarray(u_grad, dtype=np.float64).reshape(n, 3, 1)
        Ud2a = np.asarray(u_second, dtype=np.float64).reshape(n, 3, 1)
        for i in reversed(range(self.n_layers)):
            a, da, d2a, z, dz, d2z = cache[i]
            W = self.params[f"W{i}"]
            if i < self.n_layers - 1:
                s1 = _sigmoid(z)
                s2 = s1 * (1.0 - s1)
                s3 = s2 * (1.0 - 2.0 * s1)
                Uz = (
                    Ua * s1
                    + np.sum(Uda * dz, axis=1) * s2
                    + np.sum(Ud2a * (s3[:, None, :] * dz * dz + s2[:, None, :] * d2z), axis=1)
                )
                Udz = Uda * s1[:, None, :] + Ud2a * 2.0 * s2[:, None, :] * dz
                Ud2z = Ud2a * s1[:, None, :]
            else:
                Uz, Udz, Ud2z = Ua, Uda, Ud2a
            grad.arrays[f"W{i}"] += (
                a.T @ Uz
                + np.einsum("nki,nkj->ij", da, Udz)
                + np.einsum("nki,nkj->ij", d2a, Ud2z)
            )
            grad.arrays[f"b{i}"] += Uz.sum(axis=0)
            Ua, Uda, Ud2a = Uz @ W.T, Udz @ W.T, Ud2z @ W.T
        # back to features at the 7 sample points, then onto the grid
        u0 = Ua - 2.0 * Ud2a.sum(axis=1) / (h * h)
        up = Uda / (2 * h) + Ud2a / (h * h)
        um = -Uda / (2 * h) + Ud2a / (h * h)
        d_feat = np.concatenate([u0[None], np.transpose(up, (1, 0, 2)), np.transpose(um, (1, 0, 2))])
        self._scatter_grid(allpts, d_feat.reshape(7 * n, -1), grad.arrays["grid"])
        return grad


def eval_field(field: SdfField, p):
    pts = np.asarray(p, dtype=np.float64)
    out = field.value(pts)
    return float(out[0]) if pts.ndim == 1 else out


def backprop_params(field: SdfField, points, upstream) -> ParamGradient:
    """Sum over points of ``upstream_i * d field(p_i) / d theta``."""
    return field.backprop(points, upstream)


def init_params(widths: list[int], rng: Rng) -> dict[str, np.ndarray]:
    gen = rng.generator
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"W{i}"] = gen.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        params[f"b{i}"] = np.zeros(fan_out)
    return params


def make_field(
    prior_shape: AnalyticSdf,
    front_map: NormalMap,
    back_map: NormalMap,
    rng: Rng,
    grid_res: int = 16,
    channels: int = 8,
    hidden: tuple = (128, 128),
    grid_scale: float = 0.01,
) -> SdfField:
    grid = rng.child(0).generator.normal(0.0, grid_scale, size=(grid_res,) * 3 + (channels,))
    scene = PriorScene(prior_shape, grid, front_map, back_map)
    widths = [scene.feature_dim, *hidden, 1]
    return SdfField(scene, init_params(widths, rng.child(1)))


def _prior_samples(prior, rng: Rng, n: int, sigma: float = 0.05) -> np.ndarray:
    from sdfrecon.geom import surface_points

    near = surface_points(prior, rng.child(0), n - n // 16)
    near = np.clip(near + rng.child(1).generator.normal(0.0, sigma, size=near.shape), -1.0, 1.0)
    uni = rng.child(2).generator.uniform(-1.0, 1.0, size=(n // 16, 3))
    return np.concatenate([near, uni])


def warm_start(field: SdfField, rng: Rng, steps: int = 0, batch: int = 1024, lr: float = 1e-5,
               optimizer=None, n_fit: int = 8192, ridge: float = 1e-4):
    """Fit the field to the prior's signed distance so the zero level set
    exists from the first epoch.

    The output layer is solved in closed form (ridge regression on the last
    hidden activations); ``steps`` optional RMSprop steps then refine all
    parameters. Passing ``optimizer`` lets later training keep its RMS state."""
    from sdfrecon.optim import RMSprop

    prior = field.scene.prior_shape
    pts = _prior_samples(prior, rng.child(0), n_fit)
    acts, _ = field._mlp(feature_matrix(field.scene, pts))
    H = np.hstack([acts[-2], np.ones((len(pts), 1))])
    A = H.T @ H + ridge * len(pts) * np.eye(H.shape[1])
    sol = np.linalg.solve(A, H.T @ prior.value(pts))
    last = field.n_layers - 1
    field.params[f"W{last}"][:, 0] = sol[:-1]
    field.params[f"b{last}"][:] = sol[-1]
    opt = optimizer if optimizer is not None else RMSprop(lr)
    for step in range(steps):
        pts = _prior_samples(prior, rng.child(1, step), batch)
        residual = field.value(pts) - prior.value(pts)
        g = field.backprop(pts, 2.0 * residual / len(pts))
        opt.step(field.params, g.arrays)
    return field


# --------------------------------------------------------------------------
# Checkpoint container
# --------------------------------------------------------------------------

MAGIC = b"SDFRCKPT"
VERSION = 1


def _pack_matrix(buf: list, arr: np.ndarray) -> None:
    arr = np.atleast_2d(arr)
    buf.append(struct.pack("<II", *arr.shape))
    buf.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _unpack_matrix(data: memoryview, pos: int):
    rows, cols = struct.unpack_from("<II", data, pos)
    pos += 8
    n = rows * cols * 8
    arr = np.frombuffer(data[pos : pos + n], dtype="<f8").reshape(rows, cols).copy()
    return arr, pos + n


def pack_layers(layers: list[tuple[np.ndarray, np.ndarray]]) -> bytes:
    buf = [struct.pack("<I", len(layers))]
    for W, b in layers:
        _pack_matrix(buf, W)
        _pack_matrix(buf, b[None, :])
    return b"".join(buf)


def unpack_layers(data: bytes) -> list[tuple[np.ndarray, np.ndarray]]:
    view = memoryview(data)
    (count,) = struct.unpack_from("<I", view, 0)
    pos = 4
    layers = []
    for _ in range(count):
        W, pos = _unpack_matrix(view, pos)
        b, pos = _unpack_matrix(view, pos)
        layers.append((W, b[0]))
    return layers


def write_container(path: str | Path, sections: dict[bytes, bytes]) -> None:
    """Magic, version, then (4-byte tag, u64 length, payload) per section."""
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", VERSION))
        for tag, payload in sections.items():
            if len(tag) != 4:
                raise ValueError("section tags are 4 bytes")
            fh.write(tag + struct.pack("<Q", len(payload)) + payload)


def read_container(path: str | Path) -> dict[bytes, bytes]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    sections = {}
    while pos < len(data):
        tag = data[pos : pos + 4]
        (n,) = struct.unpack_from("<Q", data, pos + 4)
        sections[tag] = data[pos + 12 : pos + 12 + n]
        pos += 12 + n
    return sections


def _pack_map(nmap: NormalMap) -> bytes:
    h, w = nmap.mask.shape
    return (
        struct.pack("<II", h, w)
        + np.ascontiguousarray(nmap.normals, dtype="<f8").tobytes()
        + nmap.mask.astype(np.uint8).tobytes()
    )


def _unpack_map(data: bytes) -> NormalMap:
    h, w = struct.unpack_from("<II", data, 0)
    n = h * w * 3 * 8
    normals = np.frombuffer(data[8 : 8 + n], dtype="<f8").reshape(h, w, 3).copy()
    mask = np.frombuffer(data[8 + n : 8 + n + h * w], dtype=np.uint8).reshape(h, w).astype(bool)
    return NormalMap(normals, mask)


def field_sections(field: SdfField) -> dict[bytes, bytes]:
    layers = [(field.params[f"W{i}"], field.params[f"b{i}"]) for i in range(field.n_layers)]
    grid = field.scene.voxel_grid
    g, c = grid.shape[0], grid.shape[3]
    return {
        b"FELD": pack_layers(layers),
        b"GRID": struct.pack("<II", g, c) + np.ascontiguousarray(grid, dtype="<f8").tobytes(),
        b"FMAP": _pack_map(field.scene.front_map),
        b"BMAP": _pack_map(field.scene.back_map),
    }


def field_from_sections(sections: dict[bytes, bytes], prior_shape: AnalyticSdf) -> SdfField:
    layers = unpack_layers(sections[b"FELD"])
    g, c = struct.unpack_from("<II", sections[b"GRID"], 0)
    grid = np.frombuffer(sections[b"GRID"][8:], dtype="<f8").reshape(g, g, g, c).copy()
    scene = PriorScene(
        prior_shape, grid, _unpack_map(sections[b"FMAP"]), _unpack_map(sections[b"BMAP"])
    )
    params = {}
    for i, (W, b) in enumerate(layers):
        params[f"W{i}"] = W
        params[f"b{i}"] = b
    return SdfField(scene, params)


def save_field(path, field: SdfField, extra: dict[bytes, bytes] | None = None) -> None:
    sections = field_sections(field)
    sections.update(extra or {})
    write_container(path, sections)


def load_field(path, prior_shape: AnalyticSdf) -> SdfField:
    return field_from_sections(read_container(path), prior_shape)
