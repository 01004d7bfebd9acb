"""Run configuration: a flat ``key = value`` text schema with total validation.

Lines are ``key = value``; ``#`` starts a comment.  Lists are written
either as ``[a, b, c]`` or ``a, b, c``.  Unknown keys, type mismatches and
out-of-range values raise :class:`ConfigError` naming the key and line.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields, replace
from typing import Optional

import numpy as np

from . import geometry
from .energy import ElasticModel
from .grid import Grid

COMMANDS = ("curvature", "minimize", "sweep", "gamma-check", "zigzag", "corrugate",
            "ma-solve", "grow", "report")
METRICS = ("identity", "conformal", "conformal-monomial", "product", "edge-growth", "codazzi",
           "spherical-cap", "immersion", "tabulated")
ZIGZAG_TARGETS = {"zero": lambda x: 0.0 * x, "half": lambda x: 0.5 * x,
                  "sine": lambda x: 0.9 * np.sin(x)}
MA_DATA = ("elliptic", "hyperbolic", "zero", "file")


class ConfigError(ValueError):
    def __init__(self, msg, key=None, line=None):
        where = ""
        if key is not None:
            where += f"key {key!r}"
        if line is not None:
            where += f" (line {line})" if where else f"line {line}"
        super().__init__(f"{where}: {msg}" if where else msg)
        self.key = key
        self.line = line


@dataclass(frozen=True)
class RunConfig:
    command: str = "sweep"
    # metric
    metric: str = "conformal-monomial"
    metric_file: str = ""
    phi: tuple = (0.0, 1.0)
    k: int = 1
    d3: tuple = (1.0, 0.0, 0.0, 0.0)
    d33: tuple = (0.0, 0.0, 0.0, 0.0)
    f: tuple = (0.0, 0.0, 1.0)
    eps: float = 0.1
    kappa: float = 1.0
    c: float = 1.0
    surface: str = "plane"
    radius: float = 1.0
    # model
    density: str = "W1"
    q: float = 2.0
    # grid
    grid_n: int = 12
    grid_half_width: float = 1.0
    grid_kind: str = "chebyshev"
    # thickness data
    h: float = 0.1
    hs: tuple = (0.2, 0.1, 0.05, 0.025)
    ansatz_order: int = 1
    quadrature: int = 8
    warm: bool = True
    # convex integration
    target: str = "half"
    n: int = 32
    stages: int = 3
    lam: float = 64.0
    lam_growth: float = 4.0
    scale: float = 0.5
    # Monge-Ampere
    gamma: float = 1.5
    ma_datum: str = "elliptic"
    S_file: str = ""
    B_file: str = ""
    schedule: tuple = (10.0, 100.0, 1000.0, 10000.0)
    # growth
    steps: int = 100
    dt: float = 0.01
    alpha: float = 1.0
    beta: float = 1.0
    alpha_v: float = 1.0
    beta_v: float = 1.0
    sigma0: tuple = (0.0, 0.0, 0.0, 0.0)
    kappa0: tuple = (0.0, 0.0, 0.0, 0.0)
    perturbation: float = 0.05
    policy: str = "frozen"
    # io and tolerances
    input: str = ""
    out: str = ""
    seed: int = 0
    gtol: float = 1e-300
    rtol: float = 1e-8
    ftol: float = 1e-13
    max_iter: int = 1000
    tol_compat: Optional[float] = None

    # ------------------------------------------------------------------
    def model(self):
        return ElasticModel(self.density, self.q)

    def grid(self, boundary="free"):
        return Grid.square(self.grid_n, half_width=self.grid_half_width, kind=self.grid_kind,
                           boundary=boundary)

    def build_metric(self):
        """The 3D MetricField named by ``metric`` and its parameters."""
        m = self.metric
        if m == "identity":
            return geometry.identity_metric()
        if m == "conformal":
            return geometry.conformal_metric(list(self.phi))
        if m == "conformal-monomial":
            return geometry.conformal_monomial(self.k)
        if m == "product":
            return geometry.product_metric(_mat(self.d3), None, _mat(self.d33))
        if m == "edge-growth":
            return geometry.edge_growth_metric(list(self.f), self.eps)
        if m == "codazzi":
            return geometry.codazzi_metric(self.c)
        if m == "spherical-cap":
            return geometry.spherical_cap_metric(self.kappa)
        if m == "immersion":
            return geometry.immersion_metric(self.build_surface())
        if m == "tabulated":
            return read_metric_csv(self.metric_file)
        raise ConfigError(f"unknown metric {m!r}", "metric")

    def build_surface(self):
        maker = geometry.SURFACES[self.surface]
        return maker() if self.surface == "plane" else maker(self.radius)


def _mat(vals):
    return np.array(vals, dtype=float).reshape(2, 2)


# ---------------------------------------------------------------------------
# schema

def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


_CHOICES = {
    "command": COMMANDS,
    "metric": METRICS,
    "density": ("W1", "W2"),
    "grid_kind": ("uniform", "chebyshev"),
    "surface": tuple(geometry.SURFACES),
    "target": tuple(ZIGZAG_TARGETS),
    "ma_datum": MA_DATA,
    "policy": ("frozen", "vk-quasistatic"),
}
_LENGTHS = {"d3": 4, "d33": 4, "sigma0": 4, "kappa0": 4}
_RANGES = {
    "k": (lambda v: v >= 1, ">= 1"),
    "eps": (_positive, "> 0"),
    "kappa": (_positive, "> 0"),
    "radius": (_positive, "> 0"),
    "q": (lambda v: v > 1, "> 1"),
    "grid_n": (lambda v: v >= 8, ">= 8"),
    "grid_half_width": (_positive, "> 0"),
    "h": (_positive, "> 0"),
    "ansatz_order": (lambda v: v in (1, 2), "1 or 2"),
    "quadrature": (lambda v: v >= 2, ">= 2"),
    "n": (lambda v: v >= 1, ">= 1"),
    "stages": (lambda v: v >= 1, ">= 1"),
    "lam": (_positive, "> 0"),
    "lam_growth": (lambda v: v > 1, "> 1"),
    "scale": (lambda v: 0 < v < 1, "in (0, 1)"),
    "gamma": (lambda v: 1 < v < 2, "in (1, 2)"),
    "steps": (_nonneg, ">= 0"),
    "dt": (_positive, "> 0"),
    "alpha": (_positive, "> 0"),
    "beta": (_positive, "> 0"),
    "alpha_v": (_positive, "> 0"),
    "beta_v": (_positive, "> 0"),
    "seed": (_nonneg, ">= 0"),
    "gtol": (_positive, "> 0"),
    "rtol": (_nonneg, ">= 0"),
    "ftol": (_nonneg, ">= 0"),
    "max_iter": (lambda v: v >= 1, ">= 1"),
    "tol_compat": (lambda v: v is None or v > 0, "> 0"),
}


def _field_types():
    out = {}
    for f in fields(RunConfig):
        default = f.default
        if f.name == "tol_compat":
            out[f.name] = float
        elif isinstance(default, bool):
            out[f.name] = bool
        elif isinstance(default, tuple):
            out[f.name] = tuple
        else:
            out[f.name] = type(default)
    return out


_TYPES = _field_types()


def _split_list(text):
    t = text.strip()
    if t.startswith("[") and t.endswith("]"):
        t = t[1:-1]
    return [p.strip() for p in t.split(",") if p.strip()]


def _convert(key, raw, line=None):
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if key == "tol_compat" and raw.lower() in ("", "none"):
            return None
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if kind is int:
            val = float(raw)
            if val != int(val):
                raise ValueError(raw)
            return int(val)
        if kind is float:
            val = float(raw)
            if not math.isfinite(val):
                raise ValueError(raw)
            return val
        if kind is tuple:
            vals = tuple(float(p) for p in _split_list(raw))
            if not all(math.isfinite(v) for v in vals):
                raise ValueError(raw)
            return vals
        return raw
    except ValueError:
        raise ConfigError(f"cannot read {raw!r} as {kind.__name__}", key, line) from None


def _validate(cfg: RunConfig, lines=None):
    lines = lines or {}
    for key, choices in _CHOICES.items():
        if getattr(cfg, key) not in choices:
            raise ConfigError(f"{getattr(cfg, key)!r} is not one of {choices}", key, lines.get(key))
    for key, (ok, desc) in _RANGES.items():
        if not ok(getattr(cfg, key)):
            raise ConfigError(f"value {getattr(cfg, key)!r} out of range (needs {desc})", key, lines.get(key))
    for key, n in _LENGTHS.items():
        if len(getattr(cfg, key)) != n:
            raise ConfigError(f"expected {n} entries", key, lines.get(key))
    if cfg.metric == "conformal" and len(cfg.phi) == 0:
        raise ConfigError("phi needs at least one coefficient", "phi", lines.get("phi"))
    if cfg.command == "sweep":
        if len(cfg.hs) < 3:
            raise ConfigError("fit requires >= 3 thickness values", "hs", lines.get("hs"))
        if any(b >= a for a, b in zip(cfg.hs, cfg.hs[1:])) or min(cfg.hs) <= 0:
            raise ConfigError("thickness values must be positive and strictly decreasing", "hs", lines.get("hs"))
    if cfg.command == "gamma-check" and (not cfg.hs or min(cfg.hs) <= 0):
        raise ConfigError("thickness values must be positive", "hs", lines.get("hs"))
    if any(b <= a for a, b in zip(cfg.schedule, cfg.schedule[1:])) or min(cfg.schedule, default=0) <= 0:
        raise ConfigError("penalty schedule must be positive and strictly increasing", "schedule",
                          lines.get("schedule"))
    if cfg.metric == "tabulated" and not cfg.metric_file:
        raise ConfigError("tabulated metric needs metric_file", "metric_file", lines.get("metric_file"))
    if cfg.command == "ma-solve" and cfg.ma_datum == "file" and not cfg.S_file:
        raise ConfigError("ma_datum = file needs S_file", "S_file", lines.get("S_file"))
    if cfg.command == "report" and not cfg.input:
        raise ConfigError("report needs an input CSV", "input", lines.get("input"))
    return cfg


def parse_config(text) -> RunConfig:
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, val = (p.strip() for p in body.split("=", 1))
        key = key.replace("-", "_")
        if key not in _TYPES:
            raise ConfigError("unknown key", key, lineno)
        if key in values:
            raise ConfigError("duplicate key", key, lineno)
        values[key] = _convert(key, val, lineno)
        lines[key] = lineno
    return _validate(RunConfig(**values), lines)


def from_mapping(mapping, base: Optional[RunConfig] = None) -> RunConfig:
    """Override ``base`` with string or typed values (CLI flags), then validate."""
    changes = {}
    for key, val in mapping.items():
        key = key.replace("-", "_")
        if key not in _TYPES:
            raise ConfigError("unknown key", key)
        changes[key] = _convert(key, val) if isinstance(val, str) else val
    cfg = replace(base or RunConfig(), **changes)
    return _validate(cfg)


def _format(val):
    if val is None:
        return "none"
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, float):
        return repr(val)
    if isinstance(val, tuple):
        return "[" + ", ".join(repr(float(v)) for v in val) + "]"
    return str(val)


def serialize(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in fields(RunConfig))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize(cfg).encode()).hexdigest()


def header_lines(cfg: RunConfig):
    """Comment lines embedded in every output: hash, seed and the full configuration."""
    return [f"config_sha256 = {config_hash(cfg)}", f"seed = {cfg.seed}"] + \
        [f"config: {ln}" for ln in serialize(cfg).splitlines()]


def read_metric_csv(path):
    """Tabulated metric from CSV columns x1, x2, x3, g11, g12, ..., g33 on a tensor grid."""
    data = np.genfromtxt(path, delimiter=",", names=True, comments="#")
    need = ["x1", "x2", "x3"] + [f"g{i}{j}" for i in range(1, 4) for j in range(1, 4)]
    missing = [c for c in need if c not in data.dtype.names]
    if missing:
        raise ConfigError(f"metric CSV lacks columns {missing}", "metric_file")
    axes = [np.unique(data[c]) for c in ("x1", "x2", "x3")]
    shape = tuple(len(a) for a in axes)
    if np.prod(shape) != data.size:
        raise ConfigError("metric CSV is not a full tensor grid", "metric_file")
    order = np.lexsort((data["x3"], data["x2"], data["x1"]))
    vals = np.stack([data[c][order] for c in need[3:]], -1).reshape(shape + (3, 3))
    return geometry.tabulated_metric(*axes, vals)
