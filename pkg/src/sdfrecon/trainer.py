"""Joint training of the implicit field and the side-view discriminator."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from sdfrecon.adversary import (
    AdvLossMode,
    Discriminator,
    discriminator_gradient,
    discriminator_loss,
    generator_adv_loss,
)
from sdfrecon.field import PriorScene, SdfField, init_params, warm_start
from sdfrecon.geom import AnalyticSdf, Rng, SampleBatch, Scale, Translate, sample_batch
from sdfrecon.m2o import (
    ANALYTIC,
    M2O,
    EpsilonSchedule,
    StencilConfig,
    _curvature_terms,
    _regularizer_upstream,
    derivative_backprop,
    field_derivatives,
    schedule_epsilon,
)
from sdfrecon.optim import RMSprop
from sdfrecon.render import raymarch_backprop, raymarch_normal_map, render_field

log = logging.getLogger(__name__)


class DivergenceDetected(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class TrainConfig:
    w_d: float = 0.01
    w_e: float = 0.1
    w_c: float = 5e-4
    epochs: int = 30
    steps_per_epoch: int = 20
    batch_n: int = 1024
    near_fraction: float = 15 / 16
    sigma: float = 0.05
    epsilon0: float | None = None  # None: 1 / max(render_w, render_h)
    decay_base: float = 0.5
    fixed_eps: float | None = None
    enable_dis: bool = True
    enable_m2o: bool = True
    loss_kind: str = "mse"
    real_views: str = "sides_only"
    curvature_reduction: str = "abs_per_axis"
    lr_field: float = 1e-5
    lr_dis: float = 1e-3
    render_w: int = 48
    render_h: int = 48
    input_map_res: int = 128
    dis_warmup_epochs: int = 2
    dis_every: int = 4
    render_both_sides: bool = True
    real_pool_size: int = 8
    grid_res: int = 16
    channels: int = 8
    hidden: int = 128
    warmup_steps: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("w_d", "w_e", "w_c"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.epochs < 0 or self.steps_per_epoch < 1 or self.batch_n < 1:
            raise ValueError("epochs >= 0, steps_per_epoch >= 1 and batch_n >= 1 required")
        AdvLossMode(self.loss_kind, self.real_views)

    @property
    def adv_mode(self) -> AdvLossMode:
        return AdvLossMode(self.loss_kind, self.real_views)

    @property
    def eps_schedule(self) -> EpsilonSchedule:
        if self.epsilon0 is None:
            return EpsilonSchedule.from_resolution(self.render_h, self.render_w, self.decay_base)
        return EpsilonSchedule(self.epsilon0, self.decay_base)

    def epsilon(self, epoch: int) -> float:
        if self.fixed_eps is not None:
            return self.fixed_eps
        return schedule_epsilon(self.eps_schedule, epoch)

    def stencil(self, epoch: int) -> StencilConfig:
        return StencilConfig(
            self.epsilon(epoch), M2O if self.enable_m2o else ANALYTIC, self.curvature_reduction
        )

    @property
    def n_near(self) -> int:
        return int(round(self.batch_n * self.near_fraction))

    @property
    def n_uniform(self) -> int:
        return self.batch_n - self.n_near

    # -- flat key=value text ----------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={'none' if v is None else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        values = dataclasses.asdict(base) if base is not None else {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(val, types[key], key)
        return cls(**values)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]


def _parse_value(val: str, typ, key: str):
    typ = str(typ)
    try:
        if val.lower() == "none":
            if "None" not in typ:
                raise ValueError
            return None
        if typ.startswith("bool"):
            if val.lower() in ("true", "1", "yes"):
                return True
            if val.lower() in ("false", "0", "no"):
                return False
            raise ValueError
        if typ.startswith("int"):
            return int(val)
        if typ.startswith("float"):
            return float(val)
        return val
    except ValueError:
        raise ValueError(f"bad value {val!r} for {key}") from None


@dataclass
class TrainReport:
    rows: list = dc_field(default_factory=list)
    config_digest: str = ""
    seed: int = 0
    notes: list = dc_field(default_factory=list)
    initial_L_a: float = float("nan")

    COLUMNS = ("epoch", "L_a", "L_D", "L_gen", "L_eik", "L_curv", "total", "epsilon", "dis_active", "wall_time")

    def to_csv(self, include_time: bool = False) -> str:
        cols = [c for c in self.COLUMNS if include_time or c != "wall_time"]
        buf = io.StringIO()
        buf.write(f"# config={self.config_digest} seed={self.seed} initial_L_a={self.initial_L_a!r}\n")
        for note in self.notes:
            buf.write(f"# {note}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in self.rows:
            w.writerow([_fmt(row[c]) for c in cols])
        return buf.getvalue()

    def deterministic_rows(self) -> list:
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in self.rows]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


# --------------------------------------------------------------------------
# Loss terms
# --------------------------------------------------------------------------

def alignment_loss(field: SdfField, batch: SampleBatch) -> float:
    return float(np.mean((field.value(batch.points) - batch.gt_sdf) ** 2))


def total_loss(field, d, batch: SampleBatch, fakes, reals, cfg: TrainConfig, epoch: int):
    """Field objective L_a + w_d L_gen + w_e L_eik + w_c L_curv and its parts.

    L_D (the discriminator's own objective) is reported but does not enter
    the field objective; the generator term takes its slot."""
    stencil = cfg.stencil(epoch)
    v, g, s = field_derivatives(field, batch.points, stencil)
    parts = {
        "L_a": float(np.mean((v - batch.gt_sdf) ** 2)),
        "L_eik": float(np.mean((np.linalg.norm(g, axis=1) - 1.0) ** 2)),
        "L_curv": float(np.mean(_curvature_terms(s, stencil.curvature_reduction))),
        "L_gen": 0.0,
        "L_D": 0.0,
    }
    if cfg.enable_dis and fakes:
        parts["L_gen"] = generator_adv_loss(d, fakes, cfg.adv_mode)[0]
        parts["L_D"] = discriminator_loss(d, fakes, reals, cfg.adv_mode)
    total = parts["L_a"] + cfg.w_d * parts["L_gen"] + cfg.w_e * parts["L_eik"] + cfg.w_c * parts["L_curv"]
    parts["total"] = total
    return total, parts


def field_step_gradient(field: SdfField, batch: SampleBatch, cfg: TrainConfig, stencil: StencilConfig):
    """Exact parameter gradient of L_a + w_e L_eik + w_c L_curv, plus the parts."""
    pts = batch.points
    v, g, s = field_derivatives(field, pts, stencil)
    n = len(pts)
    residual = v - batch.gt_sdf
    parts = {
        "L_a": float(np.mean(residual**2)),
        "L_eik": float(np.mean((np.linalg.norm(g, axis=1) - 1.0) ** 2)),
        "L_curv": float(np.mean(_curvature_terms(s, stencil.curvature_reduction))),
    }
    u_g, u_s = _regularizer_upstream(g, s, cfg.w_e, cfg.w_c, stencil.curvature_reduction)
    grad = derivative_backprop(field, pts, 2.0 * residual / n, u_g, u_s, stencil)
    return grad, parts


# --------------------------------------------------------------------------
# Setup helpers
# --------------------------------------------------------------------------

def build_prior_scene(target: AnalyticSdf, prior_shape: AnalyticSdf, cfg: TrainConfig, rng: Rng) -> PriorScene:
    """Front/back target normal maps (the given image evidence) plus a fresh voxel grid."""
    res = cfg.input_map_res
    render_cfg = StencilConfig(1e-4)
    front = raymarch_normal_map(target, 0, res, res, render_cfg)
    back = raymarch_normal_map(target, 180, res, res, render_cfg)
    grid = rng.generator.normal(0.0, 0.01, size=(cfg.grid_res,) * 3 + (cfg.channels,))
    return PriorScene(prior_shape, grid, front, back)


def default_real_shapes(target: AnalyticSdf, rng: Rng, count: int) -> list[AnalyticSdf]:
    """Rescaled and shifted copies of the target, for scenes without a
    dedicated pool of held-out shapes."""
    out = []
    for i in range(count):
        g = rng.child(i).generator
        out.append(Translate(Scale(target, float(g.uniform(0.85, 1.1))), tuple(g.uniform(-0.05, 0.05, 3))))
    return out


def render_real_pool(shapes, views, w, h) -> list:
    cfg = StencilConfig(1e-4)
    return [raymarch_normal_map(s, v, w, h, cfg) for s in shapes for v in views]


def init_field(scene: PriorScene, cfg: TrainConfig, rng: Rng, optimizer: RMSprop | None = None) -> SdfField:
    scene = dataclasses.replace(scene, voxel_grid=scene.voxel_grid.copy())
    widths = [scene.feature_dim, cfg.hidden, cfg.hidden, 1]
    field = SdfField(scene, init_params(widths, rng.child(0)))
    warm_start(field, rng.child(1), steps=cfg.warmup_steps, lr=cfg.lr_field, optimizer=optimizer)
    return field


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------

def _add(acc: dict, grad: dict, scale: float = 1.0):
    for k, v in grad.items():
        acc[k] += scale * v


def train(
    target: AnalyticSdf,
    prior: PriorScene,
    cfg: TrainConfig,
    real_shapes: list[AnalyticSdf] | None = None,
    progress=None,
):
    """Returns (field, discriminator, report).

    Raises:
        DivergenceDetected: if the objective becomes non-finite.
    """
    rng = Rng(cfg.seed)
    field_opt = RMSprop(cfg.lr_field)
    field = init_field(prior, cfg, rng.child(1), field_opt)
    d = Discriminator.create(rng.child(2))
    report = TrainReport(config_digest=cfg.digest(), seed=cfg.seed)
    report.notes.append(f"weights w_d={cfg.w_d} w_e={cfg.w_e} w_c={cfg.w_c}")
    if cfg.enable_dis:
        report.notes.append(f"discriminator engages at epoch {cfg.dis_warmup_epochs}")
    step_rng = rng.child(4)
    pick_rng = rng.child(5)
    first = sample_batch(target, step_rng.child(0, 0), cfg.n_near, cfg.n_uniform, cfg.sigma)
    report.initial_L_a = alignment_loss(field, first)
    if cfg.epochs == 0:
        return field, d, report

    views = cfg.adv_mode.views
    reals = []
    if cfg.enable_dis:
        shapes = real_shapes if real_shapes is not None else default_real_shapes(target, rng.child(3), cfg.real_pool_size)
        reals = render_real_pool(shapes, views, cfg.render_w, cfg.render_h)
    dis_opt = RMSprop(cfg.lr_dis)
    w, h = cfg.render_w, cfg.render_h

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        stencil = cfg.stencil(epoch)
        dis_active = cfg.enable_dis and epoch >= cfg.dis_warmup_epochs
        sums = dict.fromkeys(("L_a", "L_D", "L_gen", "L_eik", "L_curv", "total"), 0.0)
        for step in range(cfg.steps_per_epoch):
            batch = sample_batch(target, step_rng.child(epoch, step), cfg.n_near, cfg.n_uniform, cfg.sigma)
            grad, parts = field_step_gradient(field, batch, cfg, stencil)
            parts.update(L_gen=0.0, L_D=0.0)
            fakes = []
            if dis_active and step % cfg.dis_every == 0:
                step_views = views
                if not cfg.render_both_sides:
                    step_views = (views[(epoch * cfg.steps_per_epoch + step) % len(views)],)
                rendered = [render_field(field, v, w, h, stencil) for v in step_views]
                fakes = [r.normal_map for r in rendered]
                if all(f.mask.any() for f in fakes):
                    parts["L_gen"], pixel_grads = generator_adv_loss(d, fakes, cfg.adv_mode)
                    for r, up in zip(rendered, pixel_grads):
                        _add(grad.arrays, raymarch_backprop(field, r.view, w, h, stencil, up, rendered=r).arrays, cfg.w_d)
            total = parts["L_a"] + cfg.w_d * parts["L_gen"] + cfg.w_e * parts["L_eik"] + cfg.w_c * parts["L_curv"]
            parts["total"] = total
            if not (np.isfinite(total) and grad.is_finite()):
                raise DivergenceDetected(f"non-finite objective at epoch {epoch} step {step}", report)
            field_opt.step(field.params, grad.arrays)
            if fakes:
                idx = pick_rng.child(epoch, step).generator.choice(len(reals), size=len(fakes), replace=False)
                real_batch = [reals[i] for i in idx]
                parts["L_D"], dgrad = discriminator_gradient(d, fakes, real_batch, cfg.adv_mode)
                dis_opt.step(d.params, dgrad)
            for k in sums:
                sums[k] += parts[k]
        row = {k: v / cfg.steps_per_epoch for k, v in sums.items()}
        row.update(epoch=epoch, epsilon=stencil.epsilon, dis_active=int(dis_active),
                   wall_time=time.perf_counter() - t0)
        report.rows.append(row)
        log.info("epoch %d: L_a=%.3g L_eik=%.3g total=%.3g eps=%.3g", epoch, row["L_a"], row["L_eik"], row["total"], row["epsilon"])
        if progress is not None:
            progress(row)
    return field, d, report


def save_report(path: str | Path, report: TrainReport) -> None:
    Path(path).write_text(report.to_csv())
