"""Very weak Monge-Ampere calculus and the weak-prestrain constrained energy.

All operators act on nodal fields of a :class:`~prestrain.grid.Grid`.  The
pure second derivatives use the grid's compact second-difference operator
and the mixed one the product of the two first-difference operators, so
every stencil is exact on quadratics (and cubics away from round-off).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .energy import DEFAULT_MODEL, _q2_identity_stress, q2_identity
from .grid import Grid, apply_along, grad, grad_adjoint, hess, hess_adjoint
from .minimize import MinimizeOptions, minimize_preconditioned

logger = logging.getLogger(__name__)

DEFAULT_SCHEDULE = (10.0, 1e2, 1e3, 1e4)
TOL_MA_FACTOR = 1e-3
COMPAT_FACTOR = 1e-7
COMPAT_FLOOR = 1e-12


@dataclass(frozen=True)
class WeakPrestrain:
    """Prestrain A^h = Id + h^gamma S + h^(gamma/2) x3 B on a grid."""

    grid: Grid
    S: np.ndarray
    B: np.ndarray
    gamma: float = 1.5

    def __post_init__(self):
        shape = tuple(self.grid.shape)
        for name in ("S", "B"):
            val = np.asarray(getattr(self, name), dtype=float)
            if val.shape != shape + (3, 3):
                raise ValueError(f"{name} must have shape {shape + (3, 3)}, got {val.shape}")
            if np.max(np.abs(val - np.swapaxes(val, -1, -2))) > 1e-12 * max(1.0, float(np.max(np.abs(val)))):
                raise ValueError(f"{name} must be symmetric")
            object.__setattr__(self, name, val)
        if not 1 < self.gamma < 2:
            raise ValueError("gamma must lie in (1, 2)")

    @classmethod
    def from_2x2(cls, grid, S2=None, B2=None, gamma=1.5):
        """Embed in-plane blocks into 3x3 fields (other entries zero)."""
        shape = tuple(grid.shape)
        S = np.zeros(shape + (3, 3))
        B = np.zeros(shape + (3, 3))
        if S2 is not None:
            S[..., :2, :2] = S2
        if B2 is not None:
            B[..., :2, :2] = B2
        return cls(grid, S, B, gamma)

    @property
    def S2(self):
        return self.S[..., :2, :2]

    @property
    def B2(self):
        return self.B[..., :2, :2]

    def datum(self):
        """Right side f = -curlcurl S2 of the constraint det grad^2 v = f."""
        return -curlcurl(self.S2, self.grid)


def _d12(f, grid):
    return apply_along(grid.diff_matrix(1), apply_along(grid.diff_matrix(0), f, 0), 1)


def _d12_adjoint(f, grid):
    return apply_along(grid.diff_matrix(0).T, apply_along(grid.diff_matrix(1).T, f, 1), 0)


def curlcurl(S2, grid):
    """d11 S22 + d22 S11 - 2 d12 S12 for a 2x2 field (symmetrized off-diagonal)."""
    S2 = np.asarray(S2, dtype=float)
    s12 = 0.5 * (S2[..., 0, 1] + S2[..., 1, 0])
    return (apply_along(grid.diff_matrix(0, 2), S2[..., 1, 1], 0)
            + apply_along(grid.diff_matrix(1, 2), S2[..., 0, 0], 1)
            - 2.0 * _d12(s12, grid))


def curlcurl_adjoint(r, grid):
    """Adjoint of :func:`curlcurl` (2x2 symmetric cotangent field)."""
    out = np.empty(np.shape(r) + (2, 2))
    out[..., 1, 1] = apply_along(grid.diff_matrix(0, 2).T, r, 0)
    out[..., 0, 0] = apply_along(grid.diff_matrix(1, 2).T, r, 1)
    out[..., 0, 1] = out[..., 1, 0] = -_d12_adjoint(r, grid)
    return out


def sym_grad(w, grid):
    dw = grad(w, grid)
    return 0.5 * (dw + np.swapaxes(dw, -1, -2))


def vweak_det(v, grid):
    """Very weak Hessian determinant -1/2 curlcurl(grad v (x) grad v); needs only grad v."""
    dv = grad(v, grid)
    return -0.5 * curlcurl(dv[..., :, None] * dv[..., None, :], grid)


def hessian_det(v, grid):
    """Pointwise det of the finite-difference Hessian."""
    H = hess(v, grid)
    return H[..., 0, 0] * H[..., 1, 1] - H[..., 0, 1] * H[..., 1, 0]


def ma_residual(v, prestrain: WeakPrestrain):
    """(residual field, its L2 norm) of Det grad^2 v = -curlcurl S2."""
    grid = prestrain.grid
    r = vweak_det(v, grid) + curlcurl(prestrain.S2, grid)
    return r, math.sqrt(grid.integrate(r * r))


def energy_SB(v, B, grid, model=DEFAULT_MODEL):
    """I_{S,B}(v) = 1/12 int Q2(grad^2 v + B2) with Q2 taken at g = Id3."""
    B = np.asarray(B, dtype=float)
    B2 = B[..., :2, :2] if B.shape[-1] == 3 else B
    return grid.integrate(q2_identity(hess(v, grid) + B2, model)) / 12.0


# ---------------------------------------------------------------------------
# penalty solver

class PenaltyObjective:
    """I_{S,B}(v) + mu ||Det grad^2 v + curlcurl S2||^2 on flat nodal v."""

    def __init__(self, prestrain: WeakPrestrain, mu, model=DEFAULT_MODEL):
        self.p = prestrain
        self.grid = prestrain.grid
        self.mu = float(mu)
        self.model = model
        self.c = curlcurl(prestrain.S2, self.grid)
        self.w = self.grid.weights

    def field(self, x):
        return np.asarray(x, dtype=float).reshape(self.grid.shape)

    def __call__(self, x):
        v = self.field(x)
        grid, w = self.grid, self.w
        M = hess(v, grid) + self.p.B2
        dv = grad(v, grid)
        r = -0.5 * curlcurl(dv[..., :, None] * dv[..., None, :], grid) + self.c
        val = float(np.sum(w * q2_identity(M, self.model))) / 12.0 + self.mu * float(np.sum(w * r * r))
        gM = hess_adjoint(w[..., None, None] * _q2_identity_stress(M, self.model), grid) / 12.0
        P = curlcurl_adjoint(2.0 * self.mu * w * r, grid)
        gr = grad_adjoint(-np.einsum("...ab,...b->...a", P, dv), grid)
        return val, (gM + gr).ravel()

    def hessian(self, x):
        """Energy Hessian plus the Gauss-Newton part of the penalty (dense)."""
        v = self.field(x)
        grid, w = self.grid, self.w
        n = v.size
        eye = np.eye(n).reshape(tuple(grid.shape) + (n,))
        Hs = np.moveaxis(hess(eye, grid), 2, 0).reshape(n, -1, 2, 2)
        mu_, lam_ = self.model.lame
        k = mu_ * lam_ / (mu_ + lam_)
        wf = w.ravel()
        sym = 0.5 * (Hs + np.swapaxes(Hs, -1, -2))
        tr = Hs[..., 0, 0] + Hs[..., 1, 1]
        A = np.einsum("inab,jnab,n->ij", sym, sym, 2 * mu_ * wf) + np.einsum("in,jn,n->ij", tr, tr, 2 * k * wf)
        dv = grad(v, grid)
        dE = grad(eye, grid)
        sym_outer = 0.5 * (dE[..., :, None] * dv[..., None, None, :] + dv[..., None, :, None] * dE[..., None, :])
        J = -np.moveaxis(curlcurl(sym_outer, grid), 2, 0).reshape(n, -1)
        return A / 12.0 + 2.0 * self.mu * (J * wf) @ J.T


def quadratic_warm_start(prestrain: WeakPrestrain):
    """Quadratic v whose Hessian has constant determinant equal to the mean datum.

    Positive mean: sqrt(f)/2 |x|^2 (minimal Q2 among det = f); negative:
    sqrt(-f)/2 (x1^2 - x2^2); zero: v = 0.
    """
    grid = prestrain.grid
    f = grid.integrate(prestrain.datum()) / grid.area
    X, Y = grid.mesh
    if f > 0:
        return 0.5 * math.sqrt(f) * (X**2 + Y**2)
    if f < 0:
        return 0.5 * math.sqrt(-f) * (X**2 - Y**2)
    return np.zeros(grid.shape)


@dataclass
class ConstrainedResult:
    v: np.ndarray
    residual: float
    energy: float
    infeasible: bool
    tol: float
    path: list = field(default_factory=list)

    @property
    def residual_path(self):
        return [r for _, r, _ in self.path]


def solve_constrained(prestrain: WeakPrestrain, schedule=DEFAULT_SCHEDULE, options=None,
                      model=DEFAULT_MODEL, v0=None):
    """Penalty path for min I_{S,B} subject to Det grad^2 v = -curlcurl S2.

    Each stage warm-starts from the previous one.  The residual norm must be
    nonincreasing along the path (a ValueError otherwise).  The result is
    flagged infeasible when the final residual exceeds 1e-3 ||datum||.
    """
    schedule = [float(m) for m in schedule]
    if not schedule or any(m <= 0 for m in schedule):
        raise ValueError("penalties must be positive")
    if any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("penalty schedule must be strictly increasing")
    grid = prestrain.grid
    opts = options or MinimizeOptions(gtol=1e-300, rtol=1e-10, ftol=1e-15, max_iter=400)
    v = quadratic_warm_start(prestrain) if v0 is None else np.asarray(v0, dtype=float)
    datum = prestrain.datum()
    dnorm = math.sqrt(grid.integrate(datum * datum))
    tol = TOL_MA_FACTOR * dnorm
    path = []
    for mu in schedule:
        fun = PenaltyObjective(prestrain, mu, model)
        res = minimize_preconditioned(fun, v.ravel(), fun.hessian, opts)
        v = res.x.reshape(grid.shape)
        _, rn = ma_residual(v, prestrain)
        e = energy_SB(v, prestrain.B2, grid, model)
        if path and rn > path[-1][1] * (1 + 1e-9) + 1e-14:
            raise ValueError(f"residual increased along the penalty path at mu={mu:g}")
        path.append((mu, rn, e))
        logger.info("mu=%g residual=%.3e energy=%.6e its=%d", mu, rn, e, res.iterations)
    _, rn = ma_residual(v, prestrain)
    return ConstrainedResult(v, rn, energy_SB(v, prestrain.B2, grid, model),
                             rn > max(tol, 1e-14), tol, path)


# ---------------------------------------------------------------------------
# residual-stress criterion

def curl_rows(B2, grid):
    """Row-wise curl of a 2x2 field: d1 B_{i2} - d2 B_{i1} for each row i."""
    dB = grad(np.asarray(B2, dtype=float), grid)
    return dB[..., :, 1, 0] - dB[..., :, 0, 1]


@dataclass
class IsoMAReport:
    has_residual_stress: bool
    gauss_defect: np.ndarray
    curl_B: np.ndarray
    sup_gauss: float
    sup_curl: float
    tol: float


def isoMA_check(prestrain: WeakPrestrain, tol: Optional[float] = None, margin=1):
    """curlcurl S2 + det B2 and the row-wise curl of B2, sup-normed on interior nodes."""
    grid = prestrain.grid
    B2 = prestrain.B2
    gd = curlcurl(prestrain.S2, grid) + (B2[..., 0, 0] * B2[..., 1, 1] - B2[..., 0, 1] * B2[..., 1, 0])
    cb = curl_rows(B2, grid)
    mask = grid.interior(margin)
    sg = float(np.max(np.abs(gd[mask])))
    sc = float(np.max(np.abs(cb[mask])))
    if tol is None:
        scale = max(float(np.max(np.abs(prestrain.S2))), float(np.max(np.abs(B2))), 1.0)
        tol = max(COMPAT_FACTOR * scale, COMPAT_FLOOR)
    return IsoMAReport(sg > tol or sc > tol, gd, cb, sg, sc, tol)
