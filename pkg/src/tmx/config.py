"""Run configuration and its flat ``key = value`` text format.

Keys carry a section prefix (``solver.tol``, ``mesh.source``). Floats are
written with 17 significant digits so that reading a written file gives
back the same configuration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import fem

__all__ = [
    "RunConfig",
    "ConfigError",
    "KEYS",
    "parse_mesh_source",
    "resolve_mesh",
    "parse_eps",
    "parse_floats",
    "parse_center",
]


class ConfigError(ValueError):
    """Unknown key or malformed value in a configuration file."""


@dataclass
class RunConfig:
    command: str = ""
    mesh: str = "disk:4"
    refine: int = 0
    lam: float = 0.0
    p: float = 2.0
    variant: str = "without"
    tol: float = 1e-6
    max_iters: int = 5000
    order: int = 2
    seeds: str = "bubble:6,8,10;eigen"
    rng_seed: int = 0
    out: str = ""
    save_field: bool = False
    stride: int = 1
    eps: float = math.exp(-10.0)
    center: str = ""
    gamma: float = 6.0
    E: str = "auto"
    delta: float = 0.5
    lambdas: str = "0,1,2,5"
    bracket: str = "10,200"
    threshold_tol: float = 5.0
    levels: int = 2
    margin_fraction: float = 0.05
    criteria: str = "fast"

    def to_text(self):
        lines = []
        for key, name in KEYS.items():
            lines.append(f"{key} = {_format(getattr(self, name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, base=None):
        """Parse a config file; keys not present keep the values of ``base``."""
        cfg = cls(**base.__dict__) if base is not None else cls()
        for values in _parse_lines(text):
            for name, raw in values.items():
                setattr(cfg, name, _coerce(name, raw))
        return cfg

    @staticmethod
    def keys_in(text):
        """Attribute names set by a config text."""
        out = set()
        for values in _parse_lines(text):
            out.update(values)
        return out


KEYS = {
    "command": "command",
    "mesh.source": "mesh",
    "mesh.refine": "refine",
    "params.lambda": "lam",
    "params.p": "p",
    "params.variant": "variant",
    "solver.tol": "tol",
    "solver.max_iters": "max_iters",
    "solver.order": "order",
    "seeds.spec": "seeds",
    "seeds.rng": "rng_seed",
    "output.path": "out",
    "output.save_field": "save_field",
    "potential.stride": "stride",
    "bubble.eps": "eps",
    "bubble.center": "center",
    "radial.gamma": "gamma",
    "radial.E": "E",
    "radial.delta": "delta",
    "scan.lambdas": "lambdas",
    "threshold.bracket": "bracket",
    "threshold.tol": "threshold_tol",
    "threshold.levels": "levels",
    "threshold.margin_fraction": "margin_fraction",
    "verify.criteria": "criteria",
}

_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def _coerce(name, raw):
    kind = _TYPES[name]
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {name}") from None
    return raw


def _parse_lines(text):
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        yield {KEYS[key]: raw.strip()}


def parse_eps(text):
    """Accept a float or ``e^-K`` / ``exp(-K)``."""
    s = str(text).strip().replace(" ", "")
    for prefix in ("e^", "exp("):
        if s.startswith(prefix):
            return math.exp(float(s[len(prefix):].rstrip(")")))
    return float(s)


def parse_mesh_source(spec):
    """``("disk", level, radius)``, ``("rect", w, h, nx, ny)`` or ``("file", path)``."""
    if spec.startswith("disk:"):
        parts = spec[5:].split(",")
        level = int(parts[0])
        radius = float(parts[1]) if len(parts) > 1 else 1.0
        return ("disk", level, radius)
    if spec.startswith("rect:"):
        w, h, nx, ny = spec[5:].split(",")
        return ("rect", float(w), float(h), int(nx), int(ny))
    return ("file", spec)


def resolve_mesh(spec, refine=0):
    src = parse_mesh_source(spec)
    if src[0] == "disk":
        mesh = fem.build_disk_mesh(src[1], radius=src[2])
    elif src[0] == "rect":
        mesh = fem.build_rect_mesh(*src[1:])
    else:
        mesh = fem.load_mesh(src[1])
    for _ in range(int(refine)):
        mesh = fem.refine(mesh)
    return mesh


def parse_floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def parse_center(text):
    if not text:
        return None
    xy = parse_floats(text)
    if len(xy) != 2:
        raise ConfigError(f"center needs two coordinates, got {text!r}")
    return np.array(xy)
