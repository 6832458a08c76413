"""Six-neighbour central-difference gradients, Eikonal and curvature losses,
and the coarse-to-fine step schedule.

Any object with a ``value(points)`` method, or a plain callable on (N, 3)
arrays, can serve as the field; parameter gradients need an ``SdfField``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sdfrecon.geom import DOMAIN_MAX, DOMAIN_MIN, SampleBatch, as_points

M2O = "m2o"
ANALYTIC = "analytic_autodiff"
EPS_FLOOR = 1e-4


@dataclass(frozen=True)
class StencilConfig:
    epsilon: float
    mode: str = M2O
    # "abs_per_axis": sum_k |d2_k|;  "abs_sum": |sum_k d2_k|
    curvature_reduction: str = "abs_per_axis"

    def __post_init__(self):
        if not 0 < self.epsilon <= 0.5:
            raise ValueError("epsilon must lie in (0, 0.5]")
        if self.mode not in (M2O, ANALYTIC):
            raise ValueError(f"unknown stencil mode {self.mode!r}")
        if self.curvature_reduction not in ("abs_per_axis", "abs_sum"):
            raise ValueError(f"unknown curvature reduction {self.curvature_reduction!r}")


@dataclass(frozen=True)
class EpsilonSchedule:
    epsilon0: float
    decay_base: float = 0.5
    floor: float = EPS_FLOOR

    def __post_init__(self):
        if self.epsilon0 <= 0:
            raise ValueError("epsilon0 must be positive")
        if not 0 < self.decay_base < 1:
            raise ValueError("decay_base must lie in (0, 1)")

    @classmethod
    def from_resolution(cls, h: int, w: int, decay_base: float = 0.5) -> "EpsilonSchedule":
        return cls(1.0 / max(h, w), decay_base)


def schedule_epsilon(sched: EpsilonSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return max(sched.epsilon0 * sched.decay_base**epoch, sched.floor)


def _values(field, pts: np.ndarray) -> np.ndarray:
    if hasattr(field, "value"):
        return np.asarray(field.value(pts), dtype=np.float64)
    return np.asarray(field(pts), dtype=np.float64)


@dataclass
class Stencil:
    """Sample points and linear weights of one 7-point stencil per point.

    ``points`` is (7N, 3) ordered [centers, +x, +y, +z, -x, -y, -z]; the
    gradient is ``grad_w`` applied to the 7 values and the second
    differences are ``second_w`` applied to the same values.
    """

    points: np.ndarray
    grad_w: np.ndarray  # (N, 3, 7)
    second_w: np.ndarray  # (N, 3, 7)

    @property
    def n(self) -> int:
        return len(self.grad_w)


def build_stencil(points, epsilon: float) -> Stencil:
    """Offsets leaving the domain are clamped; the gradient then becomes
    one-sided and that axis' second difference is dropped."""
    p = as_points(points)
    n = len(p)
    eye = np.eye(3)
    plus = np.clip(p[None] + epsilon * eye[:, None, :], DOMAIN_MIN, DOMAIN_MAX)
    minus = np.clip(p[None] - epsilon * eye[:, None, :], DOMAIN_MIN, DOMAIN_MAX)
    tp = (plus - p[None])[np.arange(3), :, np.arange(3)].T  # (N, 3) actual +offsets
    tm = (p[None] - minus)[np.arange(3), :, np.arange(3)].T
    span = tp + tm
    grad_w = np.zeros((n, 3, 7))
    second_w = np.zeros((n, 3, 7))
    ok = span > 0
    inv = np.where(ok, 1.0 / np.where(ok, span, 1.0), 0.0)
    both = (tp > 0) & (tm > 0)
    uniform = both & (tp == epsilon) & (tm == epsilon)
    for k in range(3):
        grad_w[:, k, 1 + k] = inv[:, k]
        grad_w[:, k, 4 + k] = -inv[:, k]
        # exact textbook weights where the stencil is symmetric
        grad_w[uniform[:, k], k, 1 + k] = 1.0 / (2 * epsilon)
        grad_w[uniform[:, k], k, 4 + k] = -1.0 / (2 * epsilon)
        safe_tp = np.where(both[:, k], tp[:, k], 1.0)
        safe_tm = np.where(both[:, k], tm[:, k], 1.0)
        cp = np.where(both[:, k], 2.0 / (span[:, k] * safe_tp), 0.0)
        cm = np.where(both[:, k], 2.0 / (span[:, k] * safe_tm), 0.0)
        cp[uniform[:, k]] = 1.0 / epsilon**2
        cm[uniform[:, k]] = 1.0 / epsilon**2
        second_w[:, k, 1 + k] = cp
        second_w[:, k, 4 + k] = cm
        second_w[:, k, 0] = -(cp + cm)
    pts = np.concatenate([p, *plus, *minus])
    return Stencil(pts, grad_w, second_w)


def stencil_derivatives(field, points, epsilon: float):
    """Center values, gradients (N, 3) and second differences (N, 3) from
    exactly 7 field evaluations per point, issued as one batch."""
    st = build_stencil(points, epsilon)
    vals = _values(field, st.points).reshape(7, st.n).T  # (N, 7)
    grad = np.einsum("nkj,nj->nk", st.grad_w, vals)
    second = np.einsum("nkj,nj->nk", st.second_w, vals)
    return vals[:, 0], grad, second


def field_derivatives(field, points, cfg: StencilConfig):
    """(value, gradient, second) by the configured route."""
    if cfg.mode == ANALYTIC:
        if not hasattr(field, "jet"):
            raise TypeError("analytic mode needs a field with a jet() method")
        return field.jet(points)
    return stencil_derivatives(field, points, cfg.epsilon)


def m2o_gradient(field, p, cfg: StencilConfig) -> np.ndarray:
    pts = np.asarray(p, dtype=np.float64)
    st = build_stencil(pts, cfg.epsilon)
    # only the 6 offset samples carry gradient weight
    vals = _values(field, st.points[st.n :]).reshape(6, st.n).T
    grad = np.einsum("nkj,nj->nk", st.grad_w[:, :, 1:], vals)
    return grad[0] if pts.ndim == 1 else grad


def m2o_second(field, p, cfg: StencilConfig) -> np.ndarray:
    pts = np.asarray(p, dtype=np.float64)
    _, _, second = stencil_derivatives(field, pts, cfg.epsilon)
    return second[0] if pts.ndim == 1 else second


def _points(batch) -> np.ndarray:
    return batch.points if isinstance(batch, SampleBatch) else as_points(batch)


def _curvature_terms(second: np.ndarray, reduction: str) -> np.ndarray:
    if reduction == "abs_sum":
        return np.abs(second.sum(axis=1))
    return np.abs(second).sum(axis=1)


def eikonal_loss(field, batch, cfg: StencilConfig) -> float:
    pts = _points(batch)
    if cfg.mode == M2O:
        g = m2o_gradient(field, pts, cfg)
    else:
        _, g, _ = field.jet(pts)
    return float(np.mean((np.linalg.norm(g, axis=1) - 1.0) ** 2))


def curvature_loss(field, batch, cfg: StencilConfig) -> float:
    pts = _points(batch)
    _, _, second = field_derivatives(field, pts, cfg)
    return float(np.mean(_curvature_terms(second, cfg.curvature_reduction)))


def regularizer_losses(field, batch, cfg: StencilConfig) -> tuple[float, float]:
    """(L_eik, L_curv) from one shared 7-point evaluation."""
    _, g, s = field_derivatives(field, _points(batch), cfg)
    eik = float(np.mean((np.linalg.norm(g, axis=1) - 1.0) ** 2))
    return eik, float(np.mean(_curvature_terms(s, cfg.curvature_reduction)))


def _regularizer_upstream(g, s, w_e, w_c, reduction):
    n = len(g)
    norm = np.linalg.norm(g, axis=1)
    safe = np.where(norm > 0, norm, 1.0)
    u_g = np.where(norm[:, None] > 0, (2.0 * w_e / n) * ((norm - 1.0) / safe)[:, None] * g, 0.0)
    if reduction == "abs_sum":
        u_s = np.repeat((w_c / n) * np.sign(s.sum(axis=1))[:, None], 3, axis=1)
    else:
        u_s = (w_c / n) * np.sign(s)
    return u_g, u_s


def derivative_backprop(field, points, u_value, u_grad, u_second, cfg: StencilConfig):
    """Parameter gradient of ``sum(u_value*v + u_grad.g + u_second.s)`` where
    (v, g, s) come from ``field_derivatives``."""
    pts = as_points(points)
    if cfg.mode == ANALYTIC:
        return field.jet_backprop(pts, u_value, u_grad, u_second)
    st = build_stencil(pts, cfg.epsilon)
    up = np.einsum("nk,nkj->nj", u_grad, st.grad_w) + np.einsum("nk,nkj->nj", u_second, st.second_w)
    up[:, 0] += u_value
    return field.backprop(st.points, up.T.reshape(-1))


def loss_backprop(field, batch, cfg: StencilConfig, w_e: float, w_c: float):
    """Exact parameter gradient of ``w_e * L_eik + w_c * L_curv``.

    Returns (gradient, L_eik, L_curv)."""
    pts = _points(batch)
    _, g, s = field_derivatives(field, pts, cfg)
    eik = float(np.mean((np.linalg.norm(g, axis=1) - 1.0) ** 2))
    curv = float(np.mean(_curvature_terms(s, cfg.curvature_reduction)))
    if w_e == 0 and w_c == 0:
        return field.zero_gradient(), eik, curv
    u_g, u_s = _regularizer_upstream(g, s, w_e, w_c, cfg.curvature_reduction)
    grad = derivative_backprop(field, pts, np.zeros(len(pts)), u_g, u_s, cfg)
    return grad, eik, curv
