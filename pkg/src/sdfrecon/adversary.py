"""Patch discriminator on normal maps.

Each map is split into a 3x3 grid of tiles, every tile is area-averaged to
16x16x3 and scored by one shared MLP; the map's score is the mean of the
nine tile scores.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from sdfrecon.geom import Rng
from sdfrecon.normalmap import NormalMap
from sdfrecon.optim import RMSprop

GRID = 3
TILE = 16
PATCH_DIM = TILE * TILE * 3
MIN_SIZE = GRID * TILE
LEAK = 0.2


class MapTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class AdvLossMode:
    loss_kind: str = "mse"  # or "bce"
    real_views: str = "sides_only"  # or "four_views"

    def __post_init__(self):
        if self.loss_kind not in ("mse", "bce"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.real_views not in ("sides_only", "four_views"):
            raise ValueError(f"unknown real view set {self.real_views!r}")

    @property
    def views(self) -> tuple:
        return (90, 270) if self.real_views == "sides_only" else (0, 90, 180, 270)


@lru_cache(maxsize=64)
def area_matrix(n_src: int, n_dst: int = TILE) -> np.ndarray:
    """(n_dst, n_src) weights averaging source cells over each target bin."""
    edges = np.linspace(0.0, n_src, n_dst + 1)
    A = np.zeros((n_dst, n_src))
    for i in range(n_dst):
        lo, hi = edges[i], edges[i + 1]
        for r in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_src)):
            A[i, r] = min(hi, r + 1) - max(lo, r)
        A[i] /= hi - lo
    return A


def tile_bounds(n: int) -> list[tuple[int, int]]:
    """Three equal spans; the remainder goes to the last."""
    base = n // GRID
    return [(0, base), (base, 2 * base), (2 * base, n)]


def split_patches(nmap: NormalMap) -> np.ndarray:
    """(9, 16, 16, 3) tiles in row-major grid order; background is zero."""
    h, w = nmap.mask.shape
    if h < MIN_SIZE or w < MIN_SIZE:
        raise MapTooSmall(f"map {w}x{h} is smaller than {MIN_SIZE}x{MIN_SIZE}")
    img = nmap.normals
    if h == w == MIN_SIZE:
        return img.reshape(GRID, TILE, GRID, TILE, 3).transpose(0, 2, 1, 3, 4).reshape(-1, TILE, TILE, 3)
    tiles = np.empty((GRID * GRID, TILE, TILE, 3))
    k = 0
    for r0, r1 in tile_bounds(h):
        Ar = area_matrix(r1 - r0)
        for c0, c1 in tile_bounds(w):
            Ac = area_matrix(c1 - c0)
            rows = np.tensordot(Ar, img[r0:r1, c0:c1], axes=(1, 0))  # (16, c, 3)
            tiles[k] = np.tensordot(Ac, rows, axes=(1, 1)).transpose(1, 0, 2)
            k += 1
    return tiles


def patches_backprop(tile_grads: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Pull (9, 16, 16, 3) tile gradients back to (h, w, 3) pixel gradients."""
    h, w = shape
    if h == w == MIN_SIZE:
        return tile_grads.reshape(GRID, GRID, TILE, TILE, 3).transpose(0, 2, 1, 3, 4).reshape(h, w, 3)
    out = np.zeros((h, w, 3))
    k = 0
    for r0, r1 in tile_bounds(h):
        Ar = area_matrix(r1 - r0)
        for c0, c1 in tile_bounds(w):
            Ac = area_matrix(c1 - c0)
            rows = np.tensordot(Ar, tile_grads[k], axes=(0, 0))  # (r, 16, 3)
            out[r0:r1, c0:c1] = np.tensordot(rows, Ac, axes=(1, 0)).transpose(0, 2, 1)
            k += 1
    return out


def stack_tiles(maps) -> np.ndarray:
    """(M * 9, 768) scorer inputs for a list of maps."""
    return np.stack([split_patches(m) for m in maps]).reshape(len(maps) * GRID * GRID, -1)


class Discriminator:
    """Shared patch scorer: 768 -> hidden (leaky ramp) -> 1 (linear)."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = params

    @classmethod
    def create(cls, rng: Rng, hidden: int = 64) -> "Discriminator":
        gen = rng.generator
        return cls(
            {
                "W0": gen.normal(0.0, 1.0 / np.sqrt(PATCH_DIM), size=(PATCH_DIM, hidden)),
                "b0": np.zeros(hidden),
                "W1": gen.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, 1)),
                "b1": np.zeros(1),
            }
        )

    def copy(self) -> "Discriminator":
        return Discriminator({k: v.copy() for k, v in self.params.items()})

    def zero_gradient(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def _forward(self, x):
        z = x @ self.params["W0"] + self.params["b0"]
        a = np.where(z > 0, z, LEAK * z)
        return z, a, (a @ self.params["W1"] + self.params["b1"])[:, 0]

    def patch_scores(self, tiles: np.ndarray) -> np.ndarray:
        return self._forward(tiles.reshape(len(tiles), -1))[2]

    def scores(self, maps: list[NormalMap], tiles: np.ndarray | None = None) -> np.ndarray:
        """Mean patch score per map."""
        if not maps:
            return np.zeros(0)
        x = stack_tiles(maps) if tiles is None else tiles
        return self._forward(x)[2].reshape(len(maps), GRID * GRID).mean(axis=1)

    def backward(self, maps: list[NormalMap], upstream: np.ndarray, want_pixels: bool = False,
                 tiles: np.ndarray | None = None):
        """Gradients of ``sum(upstream * scores(maps))``.

        Returns (param_grads, pixel_grads or None)."""
        x = stack_tiles(maps) if tiles is None else tiles
        z, a, _ = self._forward(x)
        d_out = np.repeat(np.asarray(upstream, dtype=np.float64) / (GRID * GRID), GRID * GRID)[:, None]
        grads = {
            "W1": a.T @ d_out,
            "b1": d_out.sum(axis=0),
        }
        d_a = d_out @ self.params["W1"].T
        d_z = d_a * np.where(z > 0, 1.0, LEAK)
        grads["W0"] = x.T @ d_z
        grads["b0"] = d_z.sum(axis=0)
        pixels = None
        if want_pixels:
            d_x = (d_z @ self.params["W0"].T).reshape(len(maps), GRID * GRID, TILE, TILE, 3)
            pixels = []
            for m, g in zip(maps, d_x):
                px = patches_backprop(g, m.mask.shape)
                px[~m.mask] = 0.0
                pixels.append(px)
        return grads, pixels


def discriminate(d: Discriminator, nmap: NormalMap) -> float:
    return float(d.scores([nmap])[0])


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _disc_terms(sf, sr, kind):
    """Loss and d loss / d score for fakes and reals."""
    nf, nr = len(sf), len(sr)
    if kind == "mse":
        loss = np.mean(sf**2) + np.mean((sr - 1.0) ** 2)
        return loss, 2.0 * sf / nf, 2.0 * (sr - 1.0) / nr
    loss = np.mean(_softplus(sf)) + np.mean(_softplus(-sr))
    return loss, _sigmoid(sf) / nf, (_sigmoid(sr) - 1.0) / nr


def _check_mode(mode):
    return mode if mode is not None else AdvLossMode()


def discriminator_loss(d: Discriminator, fake_sides, real_maps, mode: AdvLossMode | None = None) -> float:
    """MSE form: mean (D(fake) - 0)^2 + mean (D(real) - 1)^2; BCE form uses
    the cross-entropy of sigmoid(D)."""
    mode = _check_mode(mode)
    if not fake_sides or not real_maps:
        raise ValueError("need at least one fake and one real map")
    loss, _, _ = _disc_terms(d.scores(fake_sides), d.scores(real_maps), mode.loss_kind)
    return float(loss)


def discriminator_gradient(d: Discriminator, fakes, reals, mode: AdvLossMode | None = None):
    mode = _check_mode(mode)
    maps = list(fakes) + list(reals)
    tiles = stack_tiles(maps)
    s = d.scores(maps, tiles)
    loss, uf, ur = _disc_terms(s[: len(fakes)], s[len(fakes) :], mode.loss_kind)
    g, _ = d.backward(maps, np.concatenate([uf, ur]), tiles=tiles)
    return float(loss), g


def generator_adv_loss(d: Discriminator, fake_sides, mode: AdvLossMode | None = None):
    """Least-squares generator objective mean (D(fake) - 1)^2 (or the
    non-saturating BCE form), with per-pixel gradients for each fake map.

    Returns (loss, [dL/dnormals of shape (h, w, 3)])."""
    mode = _check_mode(mode)
    if not fake_sides:
        raise ValueError("need at least one fake map")
    tiles = stack_tiles(fake_sides)
    s = d.scores(fake_sides, tiles)
    n = len(s)
    if mode.loss_kind == "mse":
        loss = np.mean((s - 1.0) ** 2)
        up = 2.0 * (s - 1.0) / n
    else:
        loss = np.mean(_softplus(-s))
        up = (_sigmoid(s) - 1.0) / n
    _, pixels = d.backward(fake_sides, up, want_pixels=True, tiles=tiles)
    return float(loss), pixels


def discriminator_step(
    d: Discriminator, fakes, reals, mode: AdvLossMode | None, learning_rate: float,
    optimizer: RMSprop | None = None,
) -> Discriminator:
    """One descent step on the discriminator loss (fakes are constants).

    Plain gradient descent unless an optimizer carrying RMS state is given."""
    if learning_rate < 0:
        raise ValueError("learning rate must be non-negative")
    _, g = discriminator_gradient(d, fakes, reals, mode)
    new = d.copy()
    if optimizer is not None:
        optimizer.lr = learning_rate
        optimizer.step(new.params, g)
    else:
        for k, v in g.items():
            new.params[k] -= learning_rate * v
    return new
