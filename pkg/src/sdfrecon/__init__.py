"""Watertight SDF reconstruction from front/back normal supervision with
side-view regularization (stencil gradients and a patch discriminator)."""

from sdfrecon.geom import (
    Box,
    Capsule,
    Offset,
    Rng,
    Rotate,
    SampleBatch,
    Scale,
    SingularPoint,
    SmoothUnion,
    Sphere,
    Torus,
    Translate,
    Union,
    analytic_normal,
    eval_analytic,
    sample_batch,
)

__version__ = "0.1.0"

__all__ = [
    "Box",
    "Capsule",
    "Offset",
    "Rng",
    "Rotate",
    "SampleBatch",
    "Scale",
    "SingularPoint",
    "SmoothUnion",
    "Sphere",
    "Torus",
    "Translate",
    "Union",
    "analytic_normal",
    "eval_analytic",
    "sample_batch",
]
