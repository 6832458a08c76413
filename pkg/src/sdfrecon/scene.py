"""Parser for the declarative scene text format.

Grammar (one statement per line, ``#`` starts a comment)::

    [target]                      # or [prior]; starts a section
    blend 0.03                    # optional: smooth union with this k
    translate 0,0.1,0             # optional: applied to the whole section
    scale 0.9                     # optional: applied after translate
    sphere  center=0,0.6,0 radius=0.14
    capsule a=0,0.4,0 b=0,0,0 radius=0.19
    box     center=0,0,0 half=0.2,0.3,0.1
    torus   center=0,0,0 major=0.3 minor=0.08
    builtin capsule_person        # expands to a built-in target/prior pair

A section without ``blend`` is a hard union. A file without a ``[prior]``
section gets the target's hard union eroded by 0.03.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from sdfrecon.geom import (
    AnalyticSdf,
    Box,
    Capsule,
    Offset,
    Scale,
    SmoothUnion,
    Sphere,
    Torus,
    Translate,
    Union,
    capsule_person_scene,
)

DEFAULT_PRIOR_EROSION = 0.03


class SceneParseError(ValueError):
    pass


@dataclass(frozen=True)
class Scene:
    target: AnalyticSdf
    prior: AnalyticSdf
    name: str = "scene"
    builtin: str | None = None


def _vec(text: str, n: int, where: str) -> tuple:
    parts = text.split(",")
    if len(parts) != n:
        raise SceneParseError(f"{where}: expected {n} comma-separated numbers, got {text!r}")
    try:
        return tuple(float(v) for v in parts)
    except ValueError as exc:
        raise SceneParseError(f"{where}: bad number in {text!r}") from exc


def _num(text: str, where: str) -> float:
    try:
        return float(text)
    except ValueError as exc:
        raise SceneParseError(f"{where}: bad number {text!r}") from exc


_PRIMITIVES = {
    "sphere": (("center", 3), ("radius", 1)),
    "capsule": (("a", 3), ("b", 3), ("radius", 1)),
    "box": (("center", 3), ("half", 3)),
    "torus": (("center", 3), ("major", 1), ("minor", 1)),
}


def _primitive(kind: str, args: list[str], where: str) -> AnalyticSdf:
    spec = dict(_PRIMITIVES[kind])
    vals = {}
    for arg in args:
        if "=" not in arg:
            raise SceneParseError(f"{where}: expected key=value, got {arg!r}")
        key, raw = arg.split("=", 1)
        if key not in spec:
            raise SceneParseError(f"{where}: unknown parameter {key!r} for {kind}")
        n = spec[key]
        vals[key] = _num(raw, where) if n == 1 else _vec(raw, n, where)
    missing = set(spec) - set(vals)
    if missing:
        raise SceneParseError(f"{where}: {kind} missing {sorted(missing)}")
    try:
        if kind == "sphere":
            return Sphere(vals["center"], vals["radius"])
        if kind == "capsule":
            return Capsule(vals["a"], vals["b"], vals["radius"])
        if kind == "box":
            return Box(vals["center"], vals["half"])
        return Torus(vals["center"], vals["major"], vals["minor"])
    except ValueError as exc:
        raise SceneParseError(f"{where}: {exc}") from exc


class _Section:
    def __init__(self):
        self.children: list[AnalyticSdf] = []
        self.blend: float | None = None
        self.offset: tuple | None = None
        self.scale: float | None = None

    def build(self) -> AnalyticSdf:
        if not self.children:
            raise SceneParseError("section has no primitives")
        shape = self.hard()
        if self.blend is not None:
            shape = (
                SmoothUnion(tuple(self.children), self.blend)
                if len(self.children) > 1
                else self.children[0]
            )
        return self._place(shape)

    def hard(self) -> AnalyticSdf:
        return self.children[0] if len(self.children) == 1 else Union(tuple(self.children))

    def _place(self, shape):
        if self.offset is not None:
            shape = Translate(shape, self.offset)
        if self.scale is not None:
            shape = Scale(shape, self.scale)
        return shape


def parse_scene(text: str, name: str = "scene") -> Scene:
    sections: dict[str, _Section] = {}
    builtin: tuple | None = None
    current: _Section | None = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"line {lineno}"
        if line.startswith("["):
            if not line.endswith("]") or line[1:-1] not in ("target", "prior"):
                raise SceneParseError(f"{where}: unknown section {line!r}")
            current = sections.setdefault(line[1:-1], _Section())
            continue
        words = line.split()
        kind, args = words[0].lower(), words[1:]
        if kind == "builtin":
            if args != ["capsule_person"]:
                raise SceneParseError(f"{where}: unknown builtin {' '.join(args)!r}")
            builtin = capsule_person_scene()
            continue
        if current is None:
            current = sections.setdefault("target", _Section())
        if kind == "blend":
            if len(args) != 1:
                raise SceneParseError(f"{where}: blend takes one number")
            current.blend = _num(args[0], where)
            if current.blend <= 0:
                raise SceneParseError(f"{where}: blend must be positive")
        elif kind == "translate":
            if len(args) != 1:
                raise SceneParseError(f"{where}: translate takes x,y,z")
            current.offset = _vec(args[0], 3, where)
        elif kind == "scale":
            if len(args) != 1:
                raise SceneParseError(f"{where}: scale takes one number")
            current.scale = _num(args[0], where)
            if current.scale <= 0:
                raise SceneParseError(f"{where}: scale must be positive")
        elif kind in _PRIMITIVES:
            current.children.append(_primitive(kind, args, where))
        else:
            raise SceneParseError(f"{where}: unknown statement {kind!r}")

    if builtin is not None:
        if sections:
            raise SceneParseError("builtin scenes cannot be mixed with primitives")
        return Scene(builtin[0], builtin[1], name, "capsule_person")
    if "target" not in sections:
        raise SceneParseError("scene defines no target")
    target_sec = sections["target"]
    target = target_sec.build()
    if "prior" in sections:
        prior = sections["prior"].build()
    else:
        prior = target_sec._place(Offset(target_sec.hard(), DEFAULT_PRIOR_EROSION))
    return Scene(target, prior, name)


def load_scene(path: str | Path) -> Scene:
    path = Path(path)
    return parse_scene(path.read_text(), name=path.stem)
