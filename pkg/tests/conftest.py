import sys
import dataclasses

import numpy as np
import pytest

from sdfrecon.field import PriorScene, SdfField, init_params
from sdfrecon.geom import Rng, Sphere
from sdfrecon.m2o import StencilConfig
from sdfrecon.render import raymarch_normal_map


def small_scene(res=48, grid=8, channels=4, seed=3):
    target = Sphere((0.0, 0.0, 0.0), 0.5)
    prior = Sphere((0.0, 0.0, 0.0), 0.45)
    cfg = StencilConfig(1e-4)
    front = raymarch_normal_map(target, 0, res, res, cfg)
    back = raymarch_normal_map(target, 180, res, res, cfg)
    vox = Rng(seed).generator.normal(0.0, 0.1, size=(grid, grid, grid, channels))
    return PriorScene(prior, vox, front, back)


def toy_field(scene, width=16, seed=0):
    """A small field owning its own copy of the voxel grid."""
    scene = dataclasses.replace(scene, voxel_grid=scene.voxel_grid.copy())
    return SdfField(scene, init_params([scene.feature_dim, width, width, 1], Rng(seed)))


@pytest.fixture(scope="session")
def sphere_scene():
    return small_scene()


@pytest.fixture
def field(sphere_scene):
    return toy_field(sphere_scene)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(module.RESULTS):
        ok, detail = module.RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
