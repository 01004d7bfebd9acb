"""Energy density, quadratic forms and the thin-film energy hierarchy.

The 3D energy is written on the unit-thickness reference cell,

    E^h(u) = int_omega int_{-1/2}^{1/2} W(grad u^h(x', h t) A^{-1}(x', h t)) dt dx',

which equals (1/h) int_{Omega^h} W((grad u^h) A^{-1}).  The in-plane
quadrature is the grid's (Clenshaw-Curtis on Chebyshev grids, trapezoid
on uniform ones); the transverse one is Gauss-Legendre.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import (MetricField, SurfaceImmersion, grid_points3, metric_sqrt,
                       unit_normal)
from .grid import Grid, grad, grad_adjoint

logger = logging.getLogger(__name__)

SENTINEL = math.inf
DEFAULT_XQ = 8
_SQ2 = math.sqrt(2.0)


class EnergyError(ValueError):
    pass


@dataclass(frozen=True)
class ElasticModel:
    """Energy density selector with its barrier exponent and determinant guard.

    ``density="W1"``: |(F^T F)^{1/2} - I|^2 + |log det F|^q.
    ``density="W2"``: |(F^T F)^{1/2} - I|^2 + |1/det F - 1|^q.
    """

    density: str = "W1"
    q: float = 2.0
    det_guard: float = 1e-12

    def __post_init__(self):
        if self.density not in ("W1", "W2"):
            raise ValueError(f"unknown density {self.density!r}")
        if not self.q > 1:
            raise ValueError("barrier exponent q must exceed 1")
        if not self.det_guard > 0:
            raise ValueError("det_guard must be positive")

    @property
    def lame(self):
        """(mu, lam) with Q3(F) = mu |sym F|^2 + lam (tr F)^2."""
        if self.q < 2:
            raise ValueError("D^2 W(Id) does not exist for q < 2")
        return 2.0, (2.0 if self.q == 2 else 0.0)


DEFAULT_MODEL = ElasticModel()


# ---------------------------------------------------------------------------
# density

def _density_parts(F, model):
    F = np.asarray(F, dtype=float)
    U, s, Vt = np.linalg.svd(F)
    det = np.linalg.det(F)
    bad = det <= model.det_guard
    ok = ~bad
    stretch = np.sum((s - 1.0) ** 2, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        logdet = np.where(ok, np.sum(np.log(np.where(s > 0, s, 1.0)), axis=-1), 0.0)
    if model.density == "W1":
        z = logdet
    else:
        z = np.where(ok, np.expm1(-logdet), 0.0)
    return U, s, Vt, det, bad, stretch, z


def density_W(F, model=DEFAULT_MODEL):
    """W(F) per matrix; ``inf`` (the sentinel) where det F <= det_guard."""
    _, _, _, _, bad, stretch, z = _density_parts(F, model)
    val = stretch + np.abs(z) ** model.q
    return np.where(bad, SENTINEL, val)


def density_and_stress(F, model=DEFAULT_MODEL):
    """W(F) and dW/dF; the stress is zero where the sentinel is returned."""
    U, s, Vt, det, bad, stretch, z = _density_parts(F, model)
    val = np.where(bad, SENTINEL, stretch + np.abs(z) ** model.q)
    R = U @ Vt
    Fa = np.asarray(F, dtype=float)
    safe = np.where(bad[..., None, None], np.eye(3), Fa)
    FinvT = np.swapaxes(np.linalg.inv(safe), -1, -2)
    mag = model.q * np.abs(z) ** (model.q - 1) * np.sign(z)
    if model.density == "W1":
        coef = mag
    else:
        coef = -mag * (z + 1.0)
    P = 2.0 * (Fa - R) + coef[..., None, None] * FinvT
    P = np.where(bad[..., None, None], 0.0, P)
    return val, P


# ---------------------------------------------------------------------------
# quadratic forms

def q3(F, model=DEFAULT_MODEL):
    """D^2 W(Id)(F, F) = mu |sym F|^2 + lam (tr F)^2."""
    F = np.asarray(F, dtype=float)
    mu, lam = model.lame
    S = 0.5 * (F + np.swapaxes(F, -1, -2))
    return mu * np.sum(S * S, axis=(-2, -1)) + lam * np.trace(F, axis1=-2, axis2=-1) ** 2


def _sym_basis():
    E = np.zeros((6, 3, 3))
    E[0, 0, 0] = E[1, 1, 1] = E[2, 2, 2] = 1.0
    for k, (i, j) in enumerate([(0, 1), (0, 2), (1, 2)], start=3):
        E[k, i, j] = E[k, j, i] = 1.0 / _SQ2
    return E


_BASIS = _sym_basis()
# in-plane coordinates (11, 22, 12) and free ones (13, 23, 33) of the orthonormal basis
_IN = [0, 1, 3]
_FREE = [4, 5, 2]


def q2_operator(g0, model=DEFAULT_MODEL):
    """Schur-complement form of Q2 at metric values g0 (..., 3, 3).

    Returns ``(K, L)``: Q2(F2) = v^T K v with v = (F11, F22, sqrt2 symF12)
    and the minimizing extension has (S13, S23, S33) = L v.
    """
    g0 = np.asarray(g0, dtype=float)
    A = metric_sqrt(g0)
    G = np.linalg.inv(A)
    T = np.einsum("...ij,bjk,...kl->...bil", G, _BASIS, G)
    mu, lam = model.lame
    tr = np.trace(T, axis1=-2, axis2=-1)
    H = mu * np.einsum("...aij,...bij->...ab", T, T) + lam * tr[..., :, None] * tr[..., None, :]
    Hii = H[..., _IN, :][..., :, _IN]
    Hif = H[..., _IN, :][..., :, _FREE]
    Hff = H[..., _FREE, :][..., :, _FREE]
    X = np.linalg.solve(Hff, np.swapaxes(Hif, -1, -2))
    K = Hii - Hif @ X
    K = 0.5 * (K + np.swapaxes(K, -1, -2))
    scale = np.array([1.0 / _SQ2, 1.0 / _SQ2, 1.0])
    L = -X * scale[:, None]
    return K, L


def sym_coords(F2):
    F2 = np.asarray(F2, dtype=float)
    return np.stack([F2[..., 0, 0], F2[..., 1, 1], 0.5 * _SQ2 * (F2[..., 0, 1] + F2[..., 1, 0])], axis=-1)


def q2_apply(K, F2):
    v = sym_coords(F2)
    return np.einsum("...i,...ij,...j->...", v, K, v)


def q2_stress(K, F2):
    """dQ2/dF2 as a 2x2 matrix field (symmetric)."""
    Kv = np.einsum("...ij,...j->...i", K, sym_coords(F2))
    out = np.empty(Kv.shape[:-1] + (2, 2))
    out[..., 0, 0] = 2 * Kv[..., 0]
    out[..., 1, 1] = 2 * Kv[..., 1]
    out[..., 0, 1] = out[..., 1, 0] = _SQ2 * Kv[..., 2]
    return out


def q2(x, F2, g, model=DEFAULT_MODEL, return_minimizer=False):
    """Q2(x', F2) for a metric field g; optionally the minimizing (S13, S23, S33)."""
    x = np.asarray(x, dtype=float)
    pts = np.concatenate([x, np.zeros(x.shape[:-1] + (1,))], axis=-1)
    K, L = q2_operator(g(pts), model)
    val = q2_apply(K, F2)
    if return_minimizer:
        return val, np.einsum("...ij,...j->...i", L, sym_coords(F2))
    return val


def q2_identity(F2, model=DEFAULT_MODEL):
    """Q2 at g = Id3: mu |sym F2|^2 + mu lam / (mu + lam) (tr F2)^2."""
    mu, lam = model.lame
    F2 = np.asarray(F2, dtype=float)
    S = 0.5 * (F2 + np.swapaxes(F2, -1, -2))
    tr = np.trace(F2, axis1=-2, axis2=-1)
    return mu * np.sum(S * S, axis=(-2, -1)) + (mu * lam / (mu + lam)) * tr**2


def _q2_identity_stress(F2, model):
    mu, lam = model.lame
    S = 0.5 * (F2 + np.swapaxes(F2, -1, -2))
    tr = np.trace(F2, axis1=-2, axis2=-1)
    return 2 * mu * S + 2 * (mu * lam / (mu + lam)) * tr[..., None, None] * np.eye(2)


# ---------------------------------------------------------------------------
# Kirchhoff-Love deformations and the 3D energy

@dataclass(frozen=True)
class KLDeformation:
    """u(x', x3) = y0(x') + sum_k x3^k / k! b_k(x'), k = 1 .. n+1."""

    grid: Grid
    y0: np.ndarray
    directors: tuple

    def __post_init__(self):
        y0 = np.asarray(self.y0, dtype=float)
        shape = tuple(self.grid.shape) + (3,)
        if y0.shape != shape:
            raise ValueError(f"y0 has shape {y0.shape}, expected {shape}")
        bs = tuple(np.asarray(b, dtype=float) for b in self.directors)
        if not bs:
            raise ValueError("a Kirchhoff-Love deformation needs at least one director")
        for k, b in enumerate(bs, start=1):
            if b.shape != shape:
                raise ValueError(f"director b_{k} has shape {b.shape}, expected {shape}")
        object.__setattr__(self, "y0", y0)
        object.__setattr__(self, "directors", bs)

    @property
    def order(self):
        return len(self.directors) - 1

    def evaluate(self, x3):
        out = self.y0.copy()
        for k, b in enumerate(self.directors, start=1):
            out = out + (x3**k / math.factorial(k)) * b
        return out

    @classmethod
    def identity(cls, grid, order=1):
        X1, X2 = grid.mesh
        y0 = np.stack([X1, X2, np.zeros_like(X1)], axis=-1)
        b1 = np.zeros_like(y0)
        b1[..., 2] = 1.0
        return cls(grid, y0, (b1,) + tuple(np.zeros_like(y0) for _ in range(order)))

    @classmethod
    def from_immersion(cls, imm, b=None, extra=()):
        b = imm.b if b is None else b
        if b is None:
            raise ValueError("director field required")
        return cls(imm.grid, imm.y, (b,) + tuple(extra))

    def transformed(self, R, c=None):
        """Rigid motion x -> R x + c applied to the deformation."""
        R = np.asarray(R, dtype=float)
        c = np.zeros(3) if c is None else np.asarray(c, dtype=float)
        return KLDeformation(self.grid, self.y0 @ R.T + c, tuple(b @ R.T for b in self.directors))

    def pack(self):
        return np.concatenate([self.y0.ravel()] + [b.ravel() for b in self.directors])

    def unpacked(self, x):
        n = self.y0.size
        parts = [x[i * n:(i + 1) * n].reshape(self.y0.shape) for i in range(len(self.directors) + 1)]
        return KLDeformation(self.grid, parts[0], tuple(parts[1:]))


def gauss_legendre_cell(n):
    """Gauss-Legendre nodes and weights on (-1/2, 1/2)."""
    if n < 2:
        raise ValueError("transverse quadrature needs at least 2 points")
    t, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * t, 0.5 * w


class ThinFilmEnergy:
    """E^h as a function of the packed fields (y0, b_1, ..., b_{n+1}) with its gradient.

    Fields listed in ``frozen`` (0 for y0, k for b_k) are held at the values
    of ``reference`` and excluded from the unknowns.
    """

    def __init__(self, g: MetricField, grid: Grid, h: float, model=DEFAULT_MODEL,
                 order=1, quadrature=DEFAULT_XQ):
        if not h > 0:
            raise ValueError("thickness h must be positive")
        self.g, self.grid, self.h, self.model, self.order = g, grid, float(h), model, int(order)
        self.t, self.wt = gauss_legendre_cell(quadrature)
        self.Ainv = []
        for tq in self.t:
            gq = g(grid_points3(grid, self.h * tq))
            self.Ainv.append(np.linalg.inv(metric_sqrt(gq)))
        self.weights = grid.weights
        self.offending = None
        self.evaluations = 0

    def _nfields(self):
        return self.order + 2

    def unpack(self, x):
        n = self.grid.shape[0] * self.grid.shape[1] * 3
        if x.size != n * self._nfields():
            raise ValueError(f"expected {n * self._nfields()} unknowns, got {x.size}")
        return [x[i * n:(i + 1) * n].reshape(self.grid.shape + (3,)) for i in range(self._nfields())]

    def deformation(self, x):
        parts = self.unpack(np.asarray(x, dtype=float))
        return KLDeformation(self.grid, parts[0], tuple(parts[1:]))

    def __call__(self, x, need_grad=True):
        self.evaluations += 1
        fields = self.unpack(np.asarray(x, dtype=float))
        grads = [grad(f, self.grid) for f in fields]
        h = self.h
        total = 0.0
        gin = [np.zeros(self.grid.shape + (3, 2)) for _ in fields] if need_grad else None
        gout = [np.zeros(self.grid.shape + (3,)) for _ in fields] if need_grad else None
        for tq, wq, Ainv in zip(self.t, self.wt, self.Ainv):
            x3 = h * tq
            Fin = grads[0].copy()
            F3 = np.zeros(self.grid.shape + (3,))
            for k in range(1, len(fields)):
                Fin += (x3**k / math.factorial(k)) * grads[k]
                F3 += (x3 ** (k - 1) / math.factorial(k - 1)) * fields[k]
            F = np.concatenate([Fin, F3[..., None]], axis=-1)
            FA = F @ Ainv
            if need_grad:
                W, P = density_and_stress(FA, self.model)
            else:
                W = density_W(FA, self.model)
            if not np.all(np.isfinite(W)):
                idx = np.argwhere(~np.isfinite(W))[0]
                self.offending = (int(idx[0]), int(idx[1]), float(x3))
                return (SENTINEL, None) if need_grad else SENTINEL
            w = wq * self.weights
            total += float(np.sum(w * W))
            if need_grad:
                PF = (w[..., None, None] * P) @ np.swapaxes(Ainv, -1, -2)
                gin[0] += PF[..., :2]
                for k in range(1, len(fields)):
                    gin[k] += (x3**k / math.factorial(k)) * PF[..., :2]
                    gout[k] += (x3 ** (k - 1) / math.factorial(k - 1)) * PF[..., 2]
        if not need_grad:
            return total
        out = [grad_adjoint(gi, self.grid) + go for gi, go in zip(gin, gout)]
        return total, np.concatenate([o.ravel() for o in out])

    def _jacobian(self, tq):
        """Sparse map from the packed unknowns to F(x', h t) A^{-1} (rows node-major, 9 per node)."""
        from scipy import sparse

        n1, n2 = self.grid.shape
        nn = n1 * n2
        D = [sparse.kron(sparse.csr_matrix(self.grid.diff_matrix(0)), sparse.identity(n2)),
             sparse.kron(sparse.identity(n1), sparse.csr_matrix(self.grid.diff_matrix(1)))]
        x3 = self.h * tq
        blocks = []
        for m in range(self._nfields()):
            cin = x3**m / math.factorial(m)
            cout = x3 ** (m - 1) / math.factorial(m - 1) if m >= 1 else 0.0
            blocks.append([cin * D[0], cin * D[1], cout * sparse.identity(nn)])
        return blocks

    def hessian(self, x):
        """Dense Hessian of E^h; pointwise D^2 W from central differences of the stress."""
        from scipy import sparse

        fields = self.unpack(np.asarray(x, dtype=float))
        n1, n2 = self.grid.shape
        nn = n1 * n2
        nf = self._nfields()
        grads = [grad(f, self.grid) for f in fields]
        H = np.zeros((3 * nn * nf, 3 * nn * nf))
        eps = 1e-6
        for tq, wq, Ainv in zip(self.t, self.wt, self.Ainv):
            x3 = self.h * tq
            Fin = grads[0].copy()
            F3 = np.zeros(self.grid.shape + (3,))
            for k in range(1, nf):
                Fin += (x3**k / math.factorial(k)) * grads[k]
                F3 += (x3 ** (k - 1) / math.factorial(k - 1)) * fields[k]
            F = np.concatenate([Fin, F3[..., None]], axis=-1)
            FA = (F @ Ainv).reshape(nn, 3, 3)
            C = np.empty((nn, 9, 9))
            for c in range(9):
                E = np.zeros(9)
                E[c] = eps
                E = E.reshape(3, 3)
                Pp = density_and_stress(FA + E, self.model)[1]
                Pm = density_and_stress(FA - E, self.model)[1]
                C[:, :, c] = ((Pp - Pm) / (2 * eps)).reshape(nn, 9)
            C = 0.5 * (C + np.swapaxes(C, 1, 2))
            w = (wq * self.weights).reshape(nn)
            # FA[:, i, j] = sum_l Ainv[:, l, j] (d F[:, i, l] / d f_m[:, i]) f_m[:, i]
            Ai = Ainv.reshape(nn, 3, 3)
            ops = self._jacobian(tq)
            Mj = [[sum(sparse.diags(Ai[:, l, j]) @ ops[m][l] for l in range(3)) for j in range(3)]
                  for m in range(nf)]
            Jfull = sparse.bmat([[Mj[m][j] if ii == i else None for m in range(nf) for ii in range(3)]
                                 for i in range(3) for j in range(3)]).tocsr()
            Cw = C * w[:, None, None]
            Cbig = sparse.bmat([[sparse.diags(Cw[:, a, b]) for b in range(9)] for a in range(9)]).tocsr()
            H += (Jfull.T @ Cbig @ Jfull).toarray()
        # columns are ordered (m, i, node); the packed vector is (m, node, i)
        perm = np.arange(3 * nn * nf).reshape(nf, nn, 3).transpose(0, 2, 1).ravel()
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        return H[np.ix_(inv, inv)]

    def value(self, u: KLDeformation):
        if u.order != self.order:
            raise ValueError("deformation order does not match the functional")
        return self(u.pack(), need_grad=False)


def energy3d(u: KLDeformation, g: MetricField, h: float, model=DEFAULT_MODEL, quadrature=DEFAULT_XQ):
    """E^h(u) for a Kirchhoff-Love deformation; ``inf`` if det(F A^{-1}) <= det_guard somewhere."""
    fun = ThinFilmEnergy(g, u.grid, h, model, u.order, quadrature)
    val = fun.value(u)
    if not np.isfinite(val):
        logger.warning("energy sentinel at node %s", fun.offending)
    return val


# ---------------------------------------------------------------------------
# Cosserat vector and the Kirchhoff functional

def cosserat(y: SurfaceImmersion, g: MetricField):
    """b = (grad y) g2^{-1} (g13, g23) + sqrt(det g / det g2) N at x3 = 0."""
    g0 = g.on_grid(y.grid)
    _check_positive(g0)
    return _cosserat_from(y.gradient, g0)


def _cosserat_from(dy, g0):
    N, _ = unit_normal(dy)
    g2 = g0[..., :2, :2]
    c = np.linalg.solve(g2, g0[..., :2, 2][..., None])[..., 0]
    s = np.sqrt(np.linalg.det(g0) / np.linalg.det(g2))
    return np.einsum("...ka,...a->...k", dy, c) + s[..., None] * N


def _check_positive(g0):
    lam = np.linalg.eigvalsh(g0)
    if np.any(lam[..., 0] <= 0):
        raise EnergyError("metric is not positive definite on the grid")


def frame(y: SurfaceImmersion, b):
    dy = y.gradient
    return np.concatenate([dy, np.asarray(b)[..., None]], axis=-1)


@dataclass
class KirchhoffResult:
    value: float
    integrand: np.ndarray
    iso_defect: float
    warning: Optional[str] = None


class KirchhoffEnergy:
    """I_{2,g}(y) = 1/24 int Q2(x', (grad y)^T grad b - 1/2 d3 g(., 0)_{2x2}) with b = cosserat(y)."""

    def __init__(self, g: MetricField, grid: Grid, model=DEFAULT_MODEL):
        self.grid = grid
        pts = grid_points3(grid, 0.0)
        g0, dg, _ = g.derivatives(pts)
        _check_positive(g0)
        self.g0 = g0
        self.d3g2 = dg[..., 2, :2, :2]
        self.K, self.L = q2_operator(g0, model)
        self.c = np.linalg.solve(g0[..., :2, :2], g0[..., :2, 2][..., None])[..., 0]
        self.s = np.sqrt(np.linalg.det(g0) / np.linalg.det(g0[..., :2, :2]))

    def bending_strain(self, y):
        dy = grad(y, self.grid)
        b = _cosserat_from(dy, self.g0)
        db = grad(b, self.grid)
        return np.einsum("...ka,...kb->...ab", dy, db) - 0.5 * self.d3g2, dy, b, db

    def __call__(self, x):
        y = np.asarray(x, dtype=float).reshape(self.grid.shape + (3,))
        M, dy, b, db = self.bending_strain(y)
        w = self.grid.weights / 24.0
        val = float(np.sum(w * q2_apply(self.K, M)))
        P = w[..., None, None] * q2_stress(self.K, M)
        GT = np.einsum("...ka,...ba->...kb", db, P)
        Gb = grad_adjoint(np.einsum("...ka,...ab->...kb", dy, P), self.grid)
        GT = GT + Gb[..., :, None] * self.c[..., None, :]
        n = np.cross(dy[..., 0], dy[..., 1])
        nn = np.linalg.norm(n, axis=-1)
        N = n / nn[..., None]
        q = self.s[..., None] * (Gb - np.sum(Gb * N, axis=-1)[..., None] * N) / nn[..., None]
        GT[..., 0] += np.cross(dy[..., 1], q)
        GT[..., 1] += np.cross(q, dy[..., 0])
        return val, grad_adjoint(GT, self.grid).ravel()


def kirchhoff_energy(y: SurfaceImmersion, g: MetricField, model=DEFAULT_MODEL, tol_iso=1e-6):
    """I_{2,g}(y); a warning is attached when (grad y)^T grad y misses g(., 0)_{2x2} by more than tol_iso."""
    fun = KirchhoffEnergy(g, y.grid, model)
    M, dy, _, _ = fun.bending_strain(y.y)
    integrand = q2_apply(fun.K, M) / 24.0
    defect = float(np.max(np.abs(np.einsum("...ka,...kb->...ab", dy, dy) - fun.g0[..., :2, :2])))
    warn = None
    if defect > tol_iso:
        warn = f"immersion misses the midplate metric by {defect:.3e}"
        logger.warning(warn)
    return KirchhoffResult(y.grid.integrate(integrand), integrand, defect, warn)


# ---------------------------------------------------------------------------
# recovery sequences

def _solve_frames(B, rhs, where):
    cond = np.linalg.cond(B)
    bad = ~np.isfinite(cond) | (cond > 1e10)
    if np.any(bad):
        node = tuple(int(i) for i in np.argwhere(bad)[0])
        raise EnergyError(f"ill-conditioned frame in {where} at node {node}")
    return np.linalg.solve(np.swapaxes(B, -1, -2), rhs[..., None])[..., 0]


def _second_director(y, b, g, strain_free):
    """Solve B0^T d = r for the x3^2/2 director; strain_free = (S13, S23, S33) target."""
    grid = y.grid
    _, dg, _ = g.derivatives(grid_points3(grid, 0.0))
    db = grad(b, grid)
    B0 = frame(y, b)
    r = np.stack([2 * strain_free[..., 0] - np.einsum("...k,...k->...", b, db[..., 0]) + dg[..., 2, 0, 2],
                  2 * strain_free[..., 1] - np.einsum("...k,...k->...", b, db[..., 1]) + dg[..., 2, 1, 2],
                  strain_free[..., 2] + 0.5 * dg[..., 2, 2, 2]], axis=-1)
    return _solve_frames(B0, r, "recovery")


def build_recovery_h4(y0: SurfaceImmersion, b1, g: MetricField):
    """u = y0 + x3 b1 + x3^2/2 b2 with b2 making sym(B0^T B1) = 1/2 d3 g(., 0) per node."""
    b1 = np.asarray(b1, dtype=float)
    zero = np.zeros(y0.grid.shape + (3,))
    b2 = _second_director(y0, b1, g, zero)
    return KLDeformation(y0.grid, y0.y, (b1, b2))


def limsup_recovery(y: SurfaceImmersion, g: MetricField, model=DEFAULT_MODEL):
    """Recovery sequence for I_{2,g}: u = y + x3 b + x3^2/2 d.

    d realizes the optimal transverse strain of Q2 so that (1/h^2) E^h(u)
    tends to I_{2,g}(y); without it the limit is the larger value with Q3
    restricted to in-plane strains.
    """
    fun = KirchhoffEnergy(g, y.grid, model)
    M, _, b, _ = fun.bending_strain(y.y)
    free = np.einsum("...ij,...j->...i", fun.L, sym_coords(M))
    d = _second_director(y, b, g, free)
    return KLDeformation(y.grid, y.y, (b, d))


def bump_kernel(grid, eps):
    """Compact polynomial bump (1 - r^2/eps^2)^3 on the grid, unit discrete mass."""
    dx, dy = grid.spacing
    mx, my = int(math.floor(eps / dx)), int(math.floor(eps / dy))
    X, Y = np.meshgrid(np.arange(-mx, mx + 1) * dx, np.arange(-my, my + 1) * dy, indexing="ij")
    r2 = (X**2 + Y**2) / eps**2
    k = np.where(r2 < 1, (1 - r2) ** 3, 0.0)
    return k / k.sum()


def mollify(field, grid, eps):
    """Convolution with the bump; near free edges the kernel is renormalized to unit mass."""
    from scipy.signal import fftconvolve

    k = bump_kernel(grid, eps)
    field = np.asarray(field, dtype=float)
    mass = fftconvolve(np.ones(grid.shape), k, mode="same")
    if field.ndim == 2:
        return fftconvolve(field, k, mode="same") / mass
    return np.stack([fftconvolve(field[..., i], k, mode="same") / mass for i in range(field.shape[-1])], -1)


def mollified_recovery(y_rough: SurfaceImmersion, g: MetricField, h: float, alpha: float):
    """u^h = y_eps + x3 b_eps with eps = h^{1/(alpha+1)}."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if y_rough.grid.kind != "uniform":
        raise ValueError("mollification needs a uniform grid")
    eps = h ** (1.0 / (alpha + 1.0))
    if eps < 2 * max(y_rough.grid.spacing):
        raise EnergyError(f"mollification scale {eps:.3e} is below two grid spacings")
    b = y_rough.b if y_rough.b is not None else cosserat(y_rough, g)
    return KLDeformation(y_rough.grid, mollify(y_rough.y, y_rough.grid, eps),
                         (mollify(b, y_rough.grid, eps),))


# ---------------------------------------------------------------------------
# von Karman type functionals

@dataclass(frozen=True)
class VKState:
    """Plate displacements.  Classical part: v (scalar), w (in-plane 2-vector).
    Prestrained part: V (3-vector), S (2x2 strain), p (3-vector)."""

    grid: Grid
    v: Optional[np.ndarray] = None
    w: Optional[np.ndarray] = None
    V: Optional[np.ndarray] = None
    S: Optional[np.ndarray] = None
    p: Optional[np.ndarray] = None
    isometry: bool = False
    tol_iso: float = 1e-8

    def __post_init__(self):
        shape = tuple(self.grid.shape)
        for name, tail in (("v", ()), ("w", (2,)), ("V", (3,)), ("S", (2, 2)), ("p", (3,))):
            val = getattr(self, name)
            if val is None:
                continue
            val = np.asarray(val, dtype=float)
            if val.shape != shape + tail:
                raise ValueError(f"field {name} has shape {val.shape}, expected {shape + tail}")
            object.__setattr__(self, name, val)

    @classmethod
    def classical(cls, grid, v, w):
        """V = (0, 0, v), S = sym grad w, p = (-grad v, 0)."""
        V = np.zeros(tuple(grid.shape) + (3,))
        V[..., 2] = v
        dw = grad(w, grid)
        S = 0.5 * (dw + np.swapaxes(dw, -1, -2))
        p = np.zeros_like(V)
        p[..., :2] = -grad(v, grid)
        return cls(grid, v=v, w=w, V=V, S=S, p=p)

    def check_isometry(self, y0):
        """sup |sym((grad y0)^T grad V)|; raises if tagged isometric and above tol_iso."""
        if self.V is None:
            raise ValueError("state has no displacement V")
        m = np.einsum("...ka,...kb->...ab", grad(y0, self.grid), grad(self.V, self.grid))
        sup = float(np.max(np.abs(0.5 * (m + np.swapaxes(m, -1, -2)))))
        if self.isometry and sup >= self.tol_iso:
            raise ValueError(f"V is not an infinitesimal isometry (defect {sup:.3e})")
        return sup


def second_derivatives(v, grid):
    """grad(grad v): the Hessian assembled from the first-derivative operator."""
    return grad(grad(v, grid), grid)


class VKEnergy:
    """I_4(v, w) on the packed unknowns (v, w1, w2)."""

    def __init__(self, grid, model=DEFAULT_MODEL, target_strain=None, target_curvature=None):
        self.grid, self.model = grid, model
        self.S0 = target_strain
        self.K0 = target_curvature

    def split(self, x):
        n = self.grid.shape[0] * self.grid.shape[1]
        v = x[:n].reshape(self.grid.shape)
        w = np.stack([x[n:2 * n].reshape(self.grid.shape), x[2 * n:].reshape(self.grid.shape)], -1)
        return v, w

    def parts(self, v, w):
        dv = grad(v, self.grid)
        dw = grad(w, self.grid)
        E = 0.5 * (dw + np.swapaxes(dw, -1, -2)) + 0.5 * dv[..., :, None] * dv[..., None, :]
        if self.S0 is not None:
            E = E - self.S0
        Hv = second_derivatives(v, self.grid)
        if self.K0 is not None:
            Hv = Hv - self.K0
        return E, Hv, dv

    def __call__(self, x):
        v, w = self.split(np.asarray(x, dtype=float))
        E, Hv, dv = self.parts(v, w)
        wts = self.grid.weights
        val = float(np.sum(wts * (0.5 * q2_identity(E, self.model) + q2_identity(Hv, self.model) / 24.0)))
        PE = 0.5 * wts[..., None, None] * _q2_identity_stress(E, self.model)
        PH = wts[..., None, None] * _q2_identity_stress(Hv, self.model) / 24.0
        gw = grad_adjoint(PE, self.grid)
        gdv = np.einsum("...ab,...b->...a", PE + np.swapaxes(PE, -1, -2), dv) * 0.5
        gv = grad_adjoint(gdv, self.grid) + grad_adjoint(grad_adjoint(PH, self.grid), self.grid)
        return val, np.concatenate([gv.ravel(), gw[..., 0].ravel(), gw[..., 1].ravel()])

    def pack(self, v, w):
        return np.concatenate([np.ravel(v), np.ravel(w[..., 0]), np.ravel(w[..., 1])])


def vk_energy(state: VKState, model=DEFAULT_MODEL, **targets):
    """1/2 int Q2(sym grad w + 1/2 grad v (x) grad v) + 1/24 int Q2(grad^2 v) at g = Id3."""
    if state.v is None or state.w is None:
        raise ValueError("state carries no (v, w)")
    fun = VKEnergy(state.grid, model, targets.get("target_strain"), targets.get("target_curvature"))
    return fun(fun.pack(state.v, state.w))[0]


def linear_energy(v, grid, model=DEFAULT_MODEL):
    """1/24 int Q2(grad^2 v) at g = Id3."""
    return grid.integrate(q2_identity(second_derivatives(v, grid), model)) / 24.0


def solve_p(V, y0, b1, grid):
    """p with sym(B0^T [grad V, p]) = 0 off the in-plane block: B0^T p = (-b1.d1V, -b1.d2V, 0)."""
    y0 = np.asarray(y0, dtype=float)
    b1 = np.asarray(b1, dtype=float)
    dV = grad(V, grid)
    B0 = np.concatenate([grad(y0, grid), b1[..., None]], -1)
    r = np.stack([-np.einsum("...k,...k->...", b1, dV[..., 0]),
                  -np.einsum("...k,...k->...", b1, dV[..., 1]),
                  np.zeros(grid.shape)], -1)
    return _solve_frames(B0, r, "solve_p")


def vk_prestrained_energy(state: VKState, y0, b1, g: MetricField, curvature, model=DEFAULT_MODEL):
    """I_{4,g}(V, S): stretching (1/2), bending (1/24) and curvature (1/1440) terms.

    ``curvature`` is a CurvatureReport with a transverse block or a
    (n1, n2, 2, 2) array of [R_13,13 R_13,23; R_13,23 R_23,23] at x3 = 0.
    """
    if state.p is None:
        raise ValueError("state carries no p; solve it with solve_p and pass it in")
    if state.V is None or state.S is None:
        raise ValueError("state carries no (V, S)")
    grid = state.grid
    pts = grid_points3(grid, 0.0)
    g0, _, d2g = g.derivatives(pts)
    K, _ = q2_operator(g0, model)
    dV = grad(state.V, grid)
    db1 = grad(b1, grid)
    stretch = (state.S + 0.5 * np.einsum("...ka,...kb->...ab", dV, dV)
               + np.einsum("...ka,...kb->...ab", db1, db1) / 24.0 - d2g[..., 2, 2, :2, :2] / 48.0)
    bend = (np.einsum("...ka,...kb->...ab", grad(y0, grid), grad(state.p, grid))
            + np.einsum("...ka,...kb->...ab", dV, db1))
    block = curvature.curvature_block if hasattr(curvature, "curvature_block") else np.asarray(curvature)
    block = np.broadcast_to(block, tuple(grid.shape) + (2, 2))
    dens = 0.5 * q2_apply(K, stretch) + q2_apply(K, bend) / 24.0 + q2_apply(K, block) / 1440.0
    return grid.integrate(dens)


def project_symgrad(M, grid):
    """L2 projection of a 2x2 field onto {sym grad w} (the space S_y0 for y0 = id)."""
    from scipy.sparse.linalg import lsqr, LinearOperator

    n = grid.shape[0] * grid.shape[1]
    sw = np.sqrt(grid.weights)

    def fwd(x):
        w = np.stack([x[:n].reshape(grid.shape), x[n:].reshape(grid.shape)], -1)
        dw = grad(w, grid)
        S = 0.5 * (dw + np.swapaxes(dw, -1, -2))
        return (sw[..., None, None] * S).ravel()

    def adj(r):
        R = sw[..., None, None] * r.reshape(tuple(grid.shape) + (2, 2))
        R = 0.5 * (R + np.swapaxes(R, -1, -2))
        gw = grad_adjoint(R, grid)
        return np.concatenate([gw[..., 0].ravel(), gw[..., 1].ravel()])

    op = LinearOperator((4 * n, 2 * n), matvec=fwd, rmatvec=adj)
    rhs = (sw[..., None, None] * 0.5 * (M + np.swapaxes(M, -1, -2))).ravel()
    x = lsqr(op, rhs, atol=1e-14, btol=1e-14, iter_lim=20 * n)[0]
    w = np.stack([x[:n].reshape(grid.shape), x[n:].reshape(grid.shape)], -1)
    dw = grad(w, grid)
    return 0.5 * (dw + np.swapaxes(dw, -1, -2))


def higher_order_energy(V, p, y0, b1, block, coeffs, grid, model=DEFAULT_MODEL):
    """I_{2(n+1),g}(V) for flat y0 with user-supplied (alpha_n, beta_n, gamma_n).

    ``block`` is d_3^{(n-1)} [R_i3,j3](., 0) per node.
    """
    a, b, c = (float(v) for v in coeffs)
    if min(a, b, c) < 0:
        raise ValueError("coefficients must be nonnegative")
    dV = grad(V, grid)
    bend = (np.einsum("...ka,...kb->...ab", grad(y0, grid), grad(p, grid))
            + np.einsum("...ka,...kb->...ab", dV, grad(b1, grid)) + a * block)
    proj = project_symgrad(block, grid)
    dens = (q2_identity(bend, model) / 24.0 + b * q2_identity(block - proj, model)
            + c * q2_identity(proj, model))
    return grid.integrate(dens)
