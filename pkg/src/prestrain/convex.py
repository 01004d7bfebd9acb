"""Convex integration objects: 1D zigzags and one-direction corrugations of short maps.

The corrugation is a reconstruction of the standard Nash-Kuiper step with
Kuiper's circular-arc profile; the construction itself is not spelled out
in the source material, which only invokes the method.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np
from scipy.special import jv

from .geometry import MetricField, SurfaceImmersion, unit_normal
from .grid import grad

SHORT_TOL = 1e-12
N_SAMPLES = 4096
BESSEL_TERMS = 12


class CorrugationError(ValueError):
    def __init__(self, msg, suggested=None):
        super().__init__(msg)
        self.suggested = suggested


# ---------------------------------------------------------------------------
# zigzag

@dataclass(frozen=True)
class ZigzagMap:
    """Continuous piecewise affine map on [-1, 1] with slopes +-1, stored exactly."""

    knots: tuple
    values: tuple

    def __post_init__(self):
        if len(self.knots) != len(self.values) or len(self.knots) < 2:
            raise ValueError("knots and values must pair up")
        for a, b, va, vb in zip(self.knots, self.knots[1:], self.values, self.values[1:]):
            if not b > a:
                raise ValueError("knots must be strictly increasing")
            if abs(vb - va) != b - a:
                raise ValueError("every piece must have slope +1 or -1")

    @property
    def breakpoints(self):
        """Interior knots, all in (-1, 1)."""
        return self.knots[1:-1]

    @property
    def slopes(self):
        return tuple((vb - va) / (b - a) for a, b, va, vb in
                     zip(self.knots, self.knots[1:], self.values, self.values[1:]))

    def __call__(self, x):
        return np.interp(np.asarray(x, dtype=float), [float(k) for k in self.knots],
                         [float(v) for v in self.values])

    def sup_distance(self, u0, samples=N_SAMPLES):
        xs = np.union1d(np.linspace(-1.0, 1.0, samples + 1), [float(k) for k in self.knots])
        return float(np.max(np.abs(self(xs) - np.vectorize(u0)(xs))))

    def cells_per_unit(self):
        return sum(1 for s, t in zip(self.slopes, self.slopes[1:]) if s > 0 > t) / 2.0


def shortness_margin(u0, samples=N_SAMPLES):
    """1 - max |difference quotient| of u0 on a uniform sample of [-1, 1]."""
    xs = np.linspace(-1.0, 1.0, samples + 1)
    vals = np.vectorize(u0)(xs)
    return 1.0 - float(np.max(np.abs(np.diff(vals) / np.diff(xs))))


def zigzag(u0: Callable, n: int):
    """Zigzag u_n with |u_n'| = 1 and ||u_n - u0|| <= 2/n for a strictly short u0.

    Each cell of width 1/n goes up then down (slopes +1, -1) between the
    values of u0 at its ends; all knots are rational.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    margin = shortness_margin(u0)
    if margin <= 0:
        raise ValueError(f"map is not strictly short (margin {margin:.3e})")
    width = Fraction(1, n)
    ends = [Fraction(-1) + k * width for k in range(2 * n + 1)]
    vals = [Fraction(float(u0(float(a)))) for a in ends]
    knots, values = [ends[0]], [vals[0]]
    for a, b, va, vb in zip(ends, ends[1:], vals, vals[1:]):
        if abs(vb - va) > width:
            raise ValueError(f"u0 is not short on the cell [{float(a)}, {float(b)}]")
        rise = (vb - va + width) / 2
        peak = a + rise
        if a < peak < b:
            knots.append(peak)
            values.append(va + rise)
        knots.append(b)
        values.append(vb)
    return ZigzagMap(tuple(knots), tuple(values))


# ---------------------------------------------------------------------------
# short maps and corrugation

def _metric_on(g2, grid):
    if isinstance(g2, MetricField):
        if g2.dim != 2:
            raise ValueError("short_check needs a 2D metric")
        return g2(grid.points)
    arr = np.asarray(g2, dtype=float)
    return np.broadcast_to(arr, tuple(grid.shape) + (2, 2)).copy()


def short_check(u: SurfaceImmersion, g2):
    """(is_short, deficit g2 - (grad u)^T grad u); strict positivity is required."""
    dy = u.gradient
    D = _metric_on(g2, u.grid) - np.einsum("...ka,...kb->...ab", dy, dy)
    lam = np.linalg.eigvalsh(D)[..., 0]
    scale = max(1.0, float(np.max(np.abs(D))))
    return bool(np.all(lam > SHORT_TOL * scale)), D


def deficit_norm(D, grid):
    """L2 norm over the grid of the Frobenius norm of a deficit field."""
    return math.sqrt(grid.integrate(np.sum(D * D, axis=(-2, -1))))


def _solve_j0(target):
    """alpha in [0, j_{0,1}) with J0(alpha) = target, target in (0, 1]."""
    lo = np.zeros_like(target)
    hi = np.full_like(target, 2.404825557695773)
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        big = jv(0, mid) > target
        lo = np.where(big, mid, lo)
        hi = np.where(big, hi, mid)
    return 0.5 * (lo + hi)


def corrugation_stage(u: SurfaceImmersion, g2, direction, frequency, share=0.5, capacity=0.9):
    """Add one circular-arc corrugation along ``direction`` at frequency ``frequency``.

    The target increment a^2 direction (x) direction uses
    a^2 = min(share * D_dd, capacity / (d^T D^{-1} d)), which keeps the
    remaining deficit positive definite.  The returned immersion carries
    its exact gradient (the oscillatory factor is differentiated
    analytically, the slowly varying amplitudes on the grid).
    """
    xi = np.asarray(direction, dtype=float)
    xi = xi / np.linalg.norm(xi)
    lam = float(frequency)
    if lam <= 0:
        raise ValueError("frequency must be positive")
    is_short, D = short_check(u, g2)
    if not is_short:
        raise CorrugationError("input map is not strictly short")
    grid = u.grid
    dy = u.gradient
    Dxx = np.einsum("a,...ab,b->...", xi, D, xi)
    if float(np.min(Dxx)) <= 0:
        raise CorrugationError("deficit vanishes along the corrugation direction")
    G = np.einsum("...ka,...kb->...ab", dy, dy)
    w = np.einsum("...ka,...a->...k", dy, np.linalg.solve(G, np.broadcast_to(xi, G.shape[:-1])[..., None])[..., 0])
    wn = np.linalg.norm(w, axis=-1)
    e = w / wn[..., None]
    rt = 1.0 / wn
    cap = 1.0 / np.einsum("a,...a->...", xi, np.linalg.solve(D, np.broadcast_to(xi, D.shape[:-1])[..., None])[..., 0])
    a2 = np.minimum(share * Dxx, capacity * cap)
    L = np.sqrt(rt**2 + a2)
    alpha = _solve_j0(rt / L)
    nu, _ = unit_normal(dy)

    phase = 2 * np.pi * lam * np.einsum("a,...a->...", xi, grid.points)
    disp = np.zeros(u.y.shape)
    dnew = dy.copy()
    for m in range(1, 2 * BESSEL_TERMS):
        if m % 2 == 0:
            coef = (L * jv(m, alpha) / (np.pi * m))[..., None] * e          # sin(m phi) term
            trig, dtrig = np.sin(m * phase), m * np.cos(m * phase)
        else:
            coef = (-L * jv(m, alpha) / (np.pi * m))[..., None] * nu   # cos(m phi) term
            trig, dtrig = np.cos(m * phase), -m * np.sin(m * phase)
        disp += coef * trig[..., None] / lam
        dnew += grad(coef, grid) * trig[..., None, None] / lam
        dnew += 2 * np.pi * (coef * dtrig[..., None])[..., None] * xi
    out = SurfaceImmersion(u.y + disp, grid, None, dnew)
    ok, _ = short_check(out, g2)
    if not ok:
        raise CorrugationError(f"corrugated map is not short at frequency {lam:g}", suggested=2 * lam)
    return out


DIRECTIONS = (np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([1.0, 1.0]) / math.sqrt(2.0))


def corrugate(u: SurfaceImmersion, g2, stages=3, frequency=8.0, growth=4.0, directions=DIRECTIONS,
              retries=3):
    """Run ``stages`` corrugations cycling through ``directions``.

    Stage k starts at ``growth`` times the previous accepted frequency; a
    stage rejected as not short is retried at the suggested frequency up to
    ``retries`` times.  Returns the final immersion, the deficit norms
    (initial one included) and the accepted frequencies.
    """
    history = [deficit_norm(short_check(u, g2)[1], u.grid)]
    freqs = []
    lam = float(frequency)
    for k in range(stages):
        direction = directions[k % len(directions)]
        for attempt in range(retries + 1):
            try:
                u = corrugation_stage(u, g2, direction, lam)
                break
            except CorrugationError as exc:
                if exc.suggested is None or attempt == retries:
                    raise
                lam = exc.suggested
        freqs.append(lam)
        history.append(deficit_norm(short_check(u, g2)[1], u.grid))
        lam *= growth
    return u, history, freqs
