"""Command-line entry points: fit, eval and ablate."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from sdfrecon.field import load_field, save_field
from sdfrecon.geom import Rng, person_variants
from sdfrecon.metrics import MetricReport, evaluate
from sdfrecon.normalmap import CANONICAL_VIEWS, check_view, write_pfm, write_ppm
from sdfrecon.render import EmptySurface, marching_cubes, rasterize_normal_map, write_obj
from sdfrecon.scene import Scene, SceneParseError, load_scene
from sdfrecon.trainer import (
    DivergenceDetected,
    TrainConfig,
    build_prior_scene,
    default_real_shapes,
    train,
)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
VARIANTS = ("full", "w/o_dis", "w/o_m2o", "fixed_eps", "four_views", "bce_loss")
MAP_SIZE = 512
MESH_RES = 128


class UsageError(Exception):
    pass


def variant_config(base: TrainConfig, variant: str) -> TrainConfig:
    """The config for one named ablation variant."""
    if variant == "full":
        return base
    if variant == "w/o_dis":
        return dataclasses.replace(base, enable_dis=False)
    if variant == "w/o_m2o":
        return dataclasses.replace(base, enable_m2o=False)
    if variant == "fixed_eps":
        eps = base.fixed_eps if base.fixed_eps is not None else base.eps_schedule.epsilon0
        return dataclasses.replace(base, fixed_eps=eps)
    if variant == "four_views":
        return dataclasses.replace(base, real_views="four_views")
    if variant == "bce_loss":
        return dataclasses.replace(base, loss_kind="bce")
    raise UsageError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")


@dataclass
class ExperimentSpec:
    scene_path: Path
    config: TrainConfig
    out_dir: Path
    variants: tuple = ("full",)
    seeds: tuple = (0,)

    def __post_init__(self):
        for v in self.variants:
            variant_config(self.config, v)


# --------------------------------------------------------------------------
# Config and scene loading
# --------------------------------------------------------------------------

_EXPERIMENT_KEYS = ("variants", "seeds")


def read_config(path: str | None, seed: int | None) -> tuple[TrainConfig, dict]:
    """TrainConfig plus the experiment-level keys (variants, seeds)."""
    extra = {}
    text = ""
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        train_lines = []
        for line in p.read_text().splitlines():
            key = line.split("#", 1)[0].split("=", 1)[0].strip()
            if key in _EXPERIMENT_KEYS:
                extra[key] = tuple(s.strip() for s in line.split("#", 1)[0].split("=", 1)[1].split(",") if s.strip())
            else:
                train_lines.append(line)
        text = "\n".join(train_lines)
    try:
        cfg = TrainConfig.from_text(text)
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=seed)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad config: {exc}") from exc
    return cfg, extra


def read_scene(path: str) -> Scene:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"scene file not found: {p}")
    try:
        return load_scene(p)
    except SceneParseError as exc:
        raise UsageError(f"{p}: {exc}") from exc


def parse_views(text: str | None) -> tuple:
    if text is None:
        return CANONICAL_VIEWS
    try:
        views = tuple(int(v) for v in text.split(","))
        for v in views:
            check_view(v)
    except ValueError as exc:
        raise UsageError(f"bad --views {text!r}: {exc}") from exc
    return views


def real_shapes_for(scene: Scene, cfg: TrainConfig):
    rng = Rng(cfg.seed).child(7)
    if scene.builtin == "capsule_person":
        return person_variants(rng, cfg.real_pool_size)
    return default_real_shapes(scene.target, rng, cfg.real_pool_size)


def csv_header(cfg: TrainConfig, seed) -> str:
    return f"config={cfg.digest()} seed={seed}"


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def fit_scene(scene: Scene, cfg: TrainConfig):
    prior = build_prior_scene(scene.target, scene.prior, cfg, Rng(cfg.seed).child(6))
    return train(scene.target, prior, cfg, real_shapes=real_shapes_for(scene, cfg))


def cmd_fit(args) -> int:
    scene = read_scene(args.scene)
    cfg, _ = read_config(args.config, args.seed)
    views = parse_views(args.views)
    res = args.res or MESH_RES
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    try:
        field, d, report = fit_scene(scene, cfg)
    except DivergenceDetected as exc:
        if exc.report is not None:
            (out / "train_report.csv").write_text(exc.report.to_csv())
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    (out / "train_report.csv").write_text(report.to_csv())
    save_field(out / "checkpoint.sdfr", field)
    try:
        mesh = marching_cubes(field, res)
    except EmptySurface as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    write_obj(out / "mesh.obj", mesh)
    for v in views:
        nmap = rasterize_normal_map(mesh, v, MAP_SIZE, MAP_SIZE)
        write_pfm(out / f"normals_{v:03d}.pfm", nmap)
        write_ppm(out / f"normals_{v:03d}.ppm", nmap)
    print(f"wrote {out}")
    return EXIT_OK


def metric_table(rows: list[tuple[str, MetricReport | None, str]], header: str) -> str:
    cols = ["name", "status", *MetricReport.COLUMNS]
    buf = io.StringIO()
    buf.write(f"# {header}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for name, rep, status in rows:
        vals = [repr(float(getattr(rep, c))) if rep is not None else "nan" for c in MetricReport.COLUMNS]
        w.writerow([name, status, *vals])
    return buf.getvalue()


def evaluate_field(field, scene: Scene, res: int, views, seed: int) -> MetricReport:
    """Raises EmptySurface when the field has no zero crossing."""
    truth = marching_cubes(scene.target, res)
    recon = marching_cubes(field, res)
    return evaluate(recon, truth, Rng(seed).child(8), views=views, w=MAP_SIZE, h=MAP_SIZE)


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    scene = read_scene(args.scene)
    cfg, _ = read_config(args.config, args.seed)
    views = parse_views(args.views)
    res = args.res or MESH_RES
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        field = load_field(ckpt, scene.prior)
    except (ValueError, OSError) as exc:
        print(f"error: cannot read checkpoint {ckpt}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    header = csv_header(cfg, cfg.seed) + f" res={res}"
    try:
        report = evaluate_field(field, scene, res, views, cfg.seed)
    except EmptySurface as exc:
        (out / "metrics.csv").write_text(metric_table([(scene.name, None, "empty_surface")], header))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    (out / "metrics.csv").write_text(metric_table([(scene.name, report, "ok")], header))
    (out / "metrics.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return EXIT_OK


def run_ablation(spec: ExperimentSpec, scene: Scene, res: int, views) -> list:
    """One averaged row per variant; failed runs are counted, not fatal."""
    rows = []
    for variant in spec.variants:
        reports, failures = [], []
        for seed in spec.seeds:
            cfg = dataclasses.replace(variant_config(spec.config, variant), seed=int(seed))
            try:
                field, _, _ = fit_scene(scene, cfg)
                reports.append(evaluate_field(field, scene, res, views, int(seed)))
            except (DivergenceDetected, EmptySurface) as exc:
                log.warning("%s seed %s failed: %s", variant, seed, exc)
                failures.append(f"{seed}:{type(exc).__name__}")
        rows.append((variant, reports, failures))
    return rows


def ablation_table(rows, header: str) -> str:
    cols = ["variant", "runs", "failures", *MetricReport.COLUMNS]
    buf = io.StringIO()
    buf.write(f"# {header}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for variant, reports, failures in rows:
        means = [
            repr(float(np.mean([getattr(r, c) for r in reports]))) if reports else "nan"
            for c in MetricReport.COLUMNS
        ]
        w.writerow([variant, len(reports), ";".join(failures), *means])
    return buf.getvalue()


def cmd_ablate(args) -> int:
    scene = read_scene(args.scene)
    cfg, extra = read_config(args.config, args.seed)
    variants = extra.get("variants", ("full", "w/o_dis"))
    if len(variants) < 2:
        raise UsageError("ablation needs at least two variants")
    seeds = extra.get("seeds", (str(cfg.seed),))
    try:
        seeds = tuple(int(s) for s in seeds)
    except ValueError as exc:
        raise UsageError(f"bad seed list: {exc}") from exc
    spec = ExperimentSpec(Path(args.scene), cfg, Path(args.out), tuple(variants), seeds)
    views = parse_views(args.views)
    res = args.res or MESH_RES
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(spec, scene, res, views)
    header = csv_header(cfg, ",".join(str(s) for s in seeds))
    (spec.out_dir / "ablation.csv").write_text(ablation_table(rows, header))
    print((spec.out_dir / "ablation.csv").read_text(), end="")
    return EXIT_OK


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sdfrecon", description="Fit and evaluate implicit surfaces from normal maps.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--res", type=int, default=None, help=f"marching cubes resolution (default {MESH_RES})")
        p.add_argument("--views", default=None, help="comma-separated yaw angles, e.g. 0,90,180,270")

    p = sub.add_parser("fit", help="train a field on a scene")
    p.add_argument("scene")
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="evaluate a checkpoint against its scene")
    p.add_argument("checkpoint")
    p.add_argument("scene")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run ablation variants over seeds")
    p.add_argument("scene")
    common(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.res is not None and args.res < 16:
            raise UsageError("--res must be at least 16")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
