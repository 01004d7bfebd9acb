"""Thickness sweeps, exponent fits and the closed-form scaling laws."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .energy import (DEFAULT_MODEL, KLDeformation, ThinFilmEnergy, kirchhoff_energy,
                     limsup_recovery, energy3d)
from .geometry import quantization_order
from .grid import Grid
from .minimize import MinimizeOptions, minimize_preconditioned

logger = logging.getLogger(__name__)

ZERO_ENERGY = 1e-10
SWEEP_OPTIONS = MinimizeOptions(gtol=1e-300, rtol=1e-8, ftol=1e-13, max_iter=1000)


def default_grid(n=12, half_width=1.0):
    """Chebyshev grid used by sweeps: the Kirchhoff-Love fields are smooth at every h."""
    return Grid.square(n, half_width=half_width, kind="chebyshev")


@dataclass
class SweepPoint:
    h: float
    energy: float
    iterations: int
    converged: bool


@dataclass
class ScalingReport:
    points: list
    beta: Optional[float] = None
    residual: Optional[float] = None
    predicted: Optional[float] = None
    provenance: str = ""
    note: str = ""
    excluded: list = field(default_factory=list)

    def __post_init__(self):
        hs = [p.h for p in self.points]
        if any(b >= a for a, b in zip(hs, hs[1:])):
            raise ValueError("h values must be strictly decreasing")

    @property
    def pairs(self):
        return [(p.h, p.energy) for p in self.points if p.converged]

    def cumulative_betas(self):
        out, acc = [], []
        for p in self.points:
            if p.converged and p.energy > 0:
                acc.append((p.h, p.energy))
            out.append(fit_exponent(acc, min_points=2)[0] if len(acc) >= 2 else float("nan"))
        return out

    def write_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["h", "energy", "beta_fit_cumulative", "converged"])
            for p, b in zip(self.points, self.cumulative_betas()):
                w.writerow([f"{p.h:.17g}", f"{p.energy:.17g}", f"{b:.17g}", int(p.converged)])


def read_report_csv(path):
    """(h, energy, converged) rows of a report CSV, skipping comment lines."""
    rows = []
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for row in csv.DictReader(lines):
        rows.append((float(row["h"]), float(row["energy"]), bool(int(row["converged"]))))
    return rows


def fit_exponent(pairs, min_points=3):
    """Least-squares slope of log E against log h and the residual norm."""
    good = []
    for h, e in pairs:
        if e > 0 and h > 0:
            good.append((h, e))
        else:
            logger.warning("dropping nonpositive pair (h=%g, E=%g)", h, e)
    if len(good) < min_points:
        raise ValueError(f"fit requires >= {min_points} positive pairs, got {len(good)}")
    x = np.log([h for h, _ in good])
    y = np.log([e for _, e in good])
    X = np.stack([x, np.ones_like(x)], -1)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = float(np.linalg.norm(y - X @ coef))
    return float(coef[0]), resid


def _influence(pairs):
    """|residual| * leverage / (1 - leverage) per point: the shift of its own fitted value."""
    x = np.log([h for h, _ in pairs])
    y = np.log([e for _, e in pairs])
    X = np.stack([x, np.ones_like(x)], -1)
    Hm = X @ np.linalg.pinv(X)
    lev = np.diag(Hm)
    r = y - Hm @ y
    return np.abs(r) * lev / np.maximum(1 - lev, 1e-12)


def fit_report(pairs):
    """Fit with the preasymptotic rule: drop the largest h if its influence exceeds twice the mean."""
    pairs = sorted([(h, e) for h, e in pairs if e > 0], reverse=True)
    excluded = []
    if len(pairs) >= 4:
        inf = _influence(pairs)
        if inf[0] > 2 * float(np.mean(inf)):
            excluded.append(pairs[0][0])
            pairs = pairs[1:]
    beta, res = fit_exponent(pairs)
    return beta, res, excluded


def sweep(g, hs, ansatz_order=1, grid=None, model=DEFAULT_MODEL, options=None, warm=True,
          quadrature=8, predict=True):
    """Minimize E^h over Kirchhoff-Love ansatz fields for each h and fit the exponent."""
    hs = [float(h) for h in hs]
    if len(hs) < 3:
        raise ValueError("fit requires >= 3 thickness values")
    if any(b >= a for a, b in zip(hs, hs[1:])) or hs[-1] <= 0:
        raise ValueError("h values must be positive and strictly decreasing")
    grid = grid or default_grid()
    opts = options or SWEEP_OPTIONS
    points = []
    x = None
    for h in hs:
        fun = ThinFilmEnergy(g, grid, h, model, ansatz_order, quadrature)
        if x is None or not warm:
            x = KLDeformation.identity(grid, ansatz_order).pack()
        res = minimize_preconditioned(fun, x, fun.hessian, opts)
        if warm:
            x = res.x
        points.append(SweepPoint(h, res.energy, res.iterations, res.converged))
        logger.info("h=%g E=%.6e its=%d %s", h, res.energy, res.iterations, res.status)
    report = ScalingReport(points)
    return finish_report(report, g, grid if predict else None)


def finish_report(report, g=None, grid=None):
    pairs = report.pairs
    # E >= 0, so a point below ZERO_ENERGY is minimal whether or not the line search converged
    if report.points and all(p.energy < ZERO_ENERGY for p in report.points):
        report.note = "zero energy"
    elif len(pairs) >= 3:
        report.beta, report.residual, report.excluded = fit_report(pairs)
    else:
        report.note = "too few converged points"
    if g is not None and grid is not None:
        try:
            q = quantization_order(g, 4, Grid(grid.bounds, grid.shape, "free", "uniform"))
            if q.order is not None:
                report.predicted = float(q.exponent)
                report.provenance = f"quantization order n={q.order}"
            else:
                report.provenance = "no curvature obstruction up to n=4"
        except ValueError as exc:
            report.provenance = f"no prediction: {exc}"
    return report


# ---------------------------------------------------------------------------
# closed forms

CI_NOTES = (
    (Fraction(1, 3), "alpha < 1/3: exponent below 1"),
    (Fraction(1, 2), "alpha < 1/2: exponent below 4/3"),
)


def predicted_beta_ci(alpha):
    """4 alpha / (alpha + 1) for a C^{1,alpha} isometric immersion, with regime notes.

    Fractions give exact Fractions; floats are evaluated through the
    rational they round-trip to, so 0.2 gives float(2/3).
    """
    a, back = _as_number(alpha)
    if not 0 < a < 1:
        raise ValueError("Holder exponent must lie in (0, 1)")
    beta = 4 * a / (a + 1)
    notes = [txt for bound, txt in CI_NOTES if a < bound]
    if a < Fraction(1, 5):
        notes.append("alpha < 1/5: the mollified construction applies")
    return back(beta), notes


def predicted_beta_weak(gamma):
    """Upper bound exponent for weak prestrain of order h^gamma.

    gamma in (0, 2/7): gamma; gamma in [2/7, 2]: 5 gamma / 3 + 2/3.
    """
    gm, back = _as_number(gamma)
    if gm <= 0:
        raise ValueError("gamma must be positive")
    if gm < Fraction(2, 7):
        return back(gm)
    if gm > 2:
        raise ValueError("the bound is stated for gamma <= 2")
    return back(Fraction(5, 3) * gm + Fraction(2, 3))


def _as_number(v):
    """(exact value, converter back to the input's type)."""
    if isinstance(v, (Fraction, int)):
        return Fraction(v), (lambda r: r)
    x = float(v)
    snapped = Fraction(x).limit_denominator(10**6)
    if abs(float(snapped) - x) <= 2 * math.ulp(x):
        return snapped, float
    return Fraction(x), float


def beta_n(n):
    return Fraction(2) + Fraction(2, n)


@dataclass
class Regime:
    k: int
    lower: Fraction
    upper: Optional[Fraction]
    endpoint: bool


def shell_regime(beta, tol=1e-12):
    """k with beta in [beta_{k+1}, beta_k), beta_n = 2 + 2/n; beta = 4 is reported as k = 1 endpoint."""
    if beta <= 2:
        raise ValueError("regime calculator needs beta > 2")
    if isinstance(beta, Fraction):
        m = Fraction(2) / (beta - 2)
        endpoint = m.denominator == 1
        ratio = float(m)
    else:
        ratio = 2.0 / (float(beta) - 2.0)
        endpoint = abs(ratio - round(ratio)) <= tol * max(1.0, ratio)
    if endpoint:
        m = int(round(ratio))
        if m == 1:
            return Regime(1, beta_n(2), beta_n(1), True)
        return Regime(m - 1, beta_n(m), beta_n(m - 1), True)
    k = math.ceil(ratio) - 1
    if k == 0:
        return Regime(0, beta_n(1), None, False)
    return Regime(k, beta_n(k + 1), beta_n(k), False)


# ---------------------------------------------------------------------------
# Gamma-limit consistency

@dataclass
class GammaRow:
    h: float
    scaled_energy: float
    limit: float

    @property
    def gap(self):
        if self.limit == 0:
            return abs(self.scaled_energy)
        return abs(self.scaled_energy - self.limit) / abs(self.limit)


def gamma_limit_consistency(g, y, hs, model=DEFAULT_MODEL, quadrature=8):
    """Rows (h, E^h(u^h)/h^2, I_{2,g}(y)) along the recovery sequence of y."""
    limit = kirchhoff_energy(y, g, model).value
    u = limsup_recovery(y, g, model)
    rows = []
    for h in hs:
        e = energy3d(u, g, float(h), model, quadrature)
        rows.append(GammaRow(float(h), e / float(h) ** 2, limit))
    return rows
