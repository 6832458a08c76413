"""Normal-map container, view conventions and image export.

Views are orthographic along a yaw about +y. A view at ``yaw`` sees the
scene rotated by ``yaw``: ``view = R(yaw) @ world``. View space has +x to
the right, +y up and +z toward the camera. Pixel (i, j) has its center at
``x = -1 + (j + 0.5) * 2 / w``, ``y = 1 - (i + 0.5) * 2 / h``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from sdfrecon.geom import yaw_matrix

CANONICAL_VIEWS = (0, 90, 180, 270)
SIDE_VIEWS = (90, 270)


def check_view(yaw) -> int:
    y = int(yaw) % 360
    if y not in CANONICAL_VIEWS or float(yaw) != int(yaw):
        raise ValueError(f"view yaw must be one of {CANONICAL_VIEWS}, got {yaw}")
    return y


def view_matrix(yaw) -> np.ndarray:
    return yaw_matrix(check_view(yaw))


def pixel_centers(w: int, h: int) -> tuple[np.ndarray, np.ndarray]:
    """View-space (x, y) of every pixel center, each of shape (h, w)."""
    xs = -1.0 + (np.arange(w) + 0.5) * 2.0 / w
    ys = 1.0 - (np.arange(h) + 0.5) * 2.0 / h
    return np.meshgrid(xs, ys)


@dataclass
class NormalMap:
    normals: np.ndarray  # (h, w, 3), view space
    mask: np.ndarray  # (h, w) bool

    def __post_init__(self):
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.normals.shape[:2] != self.mask.shape or self.normals.shape[-1] != 3:
            raise ValueError("normals must be (h, w, 3) matching an (h, w) mask")
        self.normals[~self.mask] = 0.0

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @classmethod
    def empty(cls, w: int, h: int) -> "NormalMap":
        return cls(np.zeros((h, w, 3)), np.zeros((h, w), dtype=bool))

    def coverage(self) -> float:
        return float(self.mask.mean())

    def to_world(self, yaw) -> np.ndarray:
        """Normals rotated back into world space (zeros stay zero)."""
        return self.normals @ view_matrix(yaw)

    def sample(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Bilinear lookup at view-space (x, y).

        Masked-out pixels contribute zero vectors, so the result is
        continuous across silhouettes. Returns (normals, mask coverage).
        """
        h, w = self.mask.shape
        u = np.clip((x + 1.0) * w / 2.0 - 0.5, 0.0, w - 1.0)
        v = np.clip((1.0 - y) * h / 2.0 - 0.5, 0.0, h - 1.0)
        j0 = np.minimum(np.floor(u).astype(int), max(w - 2, 0))
        i0 = np.minimum(np.floor(v).astype(int), max(h - 2, 0))
        j1 = np.minimum(j0 + 1, w - 1)
        i1 = np.minimum(i0 + 1, h - 1)
        fu = (u - j0)[:, None]
        fv = (v - i0)[:, None]
        m = self.mask.astype(np.float64)[..., None]
        out = []
        for arr in (self.normals, m):
            top = arr[i0, j0] * (1 - fu) + arr[i0, j1] * fu
            bot = arr[i1, j0] * (1 - fu) + arr[i1, j1] * fu
            out.append(top * (1 - fv) + bot * fv)
        return out[0], out[1][:, 0]


def write_pfm(path: str | Path, nmap: NormalMap) -> None:
    """3-channel little-endian PFM; rows stored bottom to top."""
    h, w = nmap.mask.shape
    data = np.ascontiguousarray(nmap.normals[::-1].astype("<f4"))
    with open(path, "wb") as fh:
        fh.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pfm(path: str | Path) -> NormalMap:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header != b"PF":
            raise ValueError(f"{path}: not a color PFM file")
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype).reshape(h, w, 3)[::-1]
    normals = data.astype(np.float64)
    return NormalMap(normals, np.any(normals != 0.0, axis=-1))


def write_ppm(path: str | Path, nmap: NormalMap) -> None:
    """8-bit preview: n -> (n + 1) / 2 * 255; background black."""
    h, w = nmap.mask.shape
    rgb = np.clip(np.rint((nmap.normals + 1.0) * 0.5 * 255.0), 0, 255).astype(np.uint8)
    rgb[~nmap.mask] = 0
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def angular_error_deg(a: NormalMap, b: NormalMap) -> np.ndarray:
    """Per-pixel angle between two maps on their shared mask."""
    both = a.mask & b.mask
    dots = np.clip(np.sum(a.normals[both] * b.normals[both], axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(dots))
