"""Metrics, immersions and the curvature conditions that govern energy scaling.

Riemann convention: fully covariant

    R_iklm = 1/2 (d_k d_l g_im + d_i d_m g_kl - d_k d_m g_il - d_i d_l g_km)
             + g_np (G^n_kl G^p_im - G^n_km G^p_il),

so that a round sphere has R_1212 = K det g > 0 and the conformal metric
exp(2 phi(x3)) Id has R_1313(., 0) = -phi''(0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import chebyshev as C
from numpy.polynomial import polynomial as P

from .grid import Grid, grad

SYM_TOL = 1e-14
FD_STEP = 1e-3
COMPAT_FACTOR = 1e-7
COMPAT_FLOOR = 1e-12
R12_COMPONENTS = {"12,12": (0, 1, 0, 1), "12,13": (0, 1, 0, 2), "12,23": (0, 1, 1, 2)}


class MetricError(ValueError):
    pass


def metric_sqrt(g_value):
    """Symmetric positive definite square root of an SPD matrix (batched)."""
    g = np.asarray(g_value, dtype=float)
    _check_spd(g)
    lam, vec = np.linalg.eigh(g)
    return np.einsum("...ik,...k,...jk->...ij", vec, np.sqrt(lam), vec)


def _check_spd(g):
    scale = np.maximum(np.max(np.abs(g), axis=(-2, -1)), 1.0)
    asym = np.max(np.abs(g - np.swapaxes(g, -1, -2)), axis=(-2, -1))
    if np.any(asym > SYM_TOL * scale):
        raise MetricError(f"matrix is not symmetric (asymmetry {float(np.max(asym)):.3e})")
    lam = np.linalg.eigvalsh(g)
    if np.any(lam[..., 0] <= 0):
        worst = float(np.min(lam[..., 0]))
        raise MetricError(f"matrix is not positive definite: eigenvalue {worst:.6g}")


@dataclass(frozen=True)
class MetricField:
    """A Riemannian metric sampled pointwise.

    ``sampler(x)`` maps points of shape (..., dim) to (..., dim, dim).  An
    optional ``jet(x)`` returns ``(g, dg, d2g)`` with ``dg[..., a, i, j] =
    d_a g_ij`` and ``d2g[..., a, b, i, j] = d_a d_b g_ij``; without it the
    derivatives come from central differences with step ``step``.
    ``smoothness`` counts the transverse derivatives the field supports.
    """

    sampler: Callable
    dim: int = 3
    jet: Optional[Callable] = None
    step: float = FD_STEP
    name: str = "custom"
    smoothness: int = 2
    params: dict = field(default_factory=dict, compare=False)

    def __call__(self, x):
        return self.sampler(np.asarray(x, dtype=float))

    def derivatives(self, x):
        x = np.asarray(x, dtype=float)
        if self.jet is not None:
            return self.jet(x)
        return fd_jet(self.sampler, x, self.dim, self.step)

    def on_grid(self, grid, x3=0.0):
        """Metric at (x', x3) for every node, shape (n1, n2, dim, dim)."""
        return self(grid_points3(grid, x3)[..., : self.dim])

    def restricted(self):
        """The in-plane block g(., 0)_{2x2} as a two-dimensional metric."""
        if self.dim != 3:
            raise ValueError("restriction needs a 3D metric")
        parent = self

        def sampler(x):
            return parent(_lift(x))[..., :2, :2]

        def jet(x):
            g, dg, d2g = parent.derivatives(_lift(x))
            return g[..., :2, :2], dg[..., :2, :2, :2], d2g[..., :2, :2, :2, :2]

        return MetricField(sampler, 2, jet, self.step, f"{self.name}|2x2", self.smoothness)

    def check(self, x):
        """Assert the symmetric / positive definite invariants at sample points."""
        _check_spd(self(x))


def _lift(x):
    return np.concatenate([x, np.zeros(x.shape[:-1] + (1,))], axis=-1)


def grid_points3(grid, x3=0.0):
    X1, X2 = grid.mesh
    return np.stack([X1, X2, np.full_like(X1, x3)], axis=-1)


def fd_jet(sampler, x, dim, step, richardson=True):
    """Central-difference jet; Richardson-combined over steps h and 2h (fourth order)."""
    if richardson:
        g, d1, d2 = _fd_jet(sampler, x, dim, step)
        _, e1, e2 = _fd_jet(sampler, x, dim, 2 * step)
        return g, (4 * d1 - e1) / 3, (4 * d2 - e2) / 3
    return _fd_jet(sampler, x, dim, step)


def _fd_jet(sampler, x, dim, step):
    g = sampler(x)
    dg = np.empty(x.shape[:-1] + (dim, dim, dim))
    d2g = np.empty(x.shape[:-1] + (dim, dim, dim, dim))
    eye = np.eye(dim) * step
    plus = [sampler(x + eye[a]) for a in range(dim)]
    minus = [sampler(x - eye[a]) for a in range(dim)]
    for a in range(dim):
        dg[..., a, :, :] = (plus[a] - minus[a]) / (2 * step)
        d2g[..., a, a, :, :] = (plus[a] - 2 * g + minus[a]) / step**2
        for b in range(a + 1, dim):
            mixed = (sampler(x + eye[a] + eye[b]) - sampler(x + eye[a] - eye[b])
                     - sampler(x - eye[a] + eye[b]) + sampler(x - eye[a] - eye[b])) / (4 * step**2)
            d2g[..., a, b, :, :] = mixed
            d2g[..., b, a, :, :] = mixed
    return g, dg, d2g


# ---------------------------------------------------------------------------
# builtin metrics

def identity_metric(dim=3):
    def sampler(x):
        return np.broadcast_to(np.eye(dim), x.shape[:-1] + (dim, dim)).copy()

    def jet(x):
        shape = x.shape[:-1]
        return sampler(x), np.zeros(shape + (dim,) * 3), np.zeros(shape + (dim,) * 4)

    return MetricField(sampler, dim, jet, name="identity", smoothness=99, params={"metric": "identity"})


def conformal_metric(phi):
    """exp(2 phi(x3)) Id_3 with phi a polynomial given by its coefficients (ascending)."""
    coef = np.trim_zeros(np.asarray(phi, dtype=float), "b")
    if coef.size == 0:
        coef = np.zeros(1)
    d1 = P.polyder(coef) if coef.size > 1 else np.zeros(1)
    d2 = P.polyder(d1) if d1.size > 1 else np.zeros(1)
    eye = np.eye(3)

    def sampler(x):
        e = np.exp(2 * P.polyval(x[..., 2], coef))
        return e[..., None, None] * eye

    def jet(x):
        t = x[..., 2]
        e = np.exp(2 * P.polyval(t, coef))
        p1, p2 = P.polyval(t, d1), P.polyval(t, d2)
        shape = x.shape[:-1]
        dg = np.zeros(shape + (3, 3, 3))
        d2g = np.zeros(shape + (3, 3, 3, 3))
        dg[..., 2, :, :] = (2 * p1 * e)[..., None, None] * eye
        d2g[..., 2, 2, :, :] = ((2 * p2 + 4 * p1**2) * e)[..., None, None] * eye
        return e[..., None, None] * eye, dg, d2g

    return MetricField(sampler, 3, jet, name="conformal", smoothness=99,
                       params={"metric": "conformal", "phi": [float(c) for c in coef]})


def conformal_monomial(k):
    """exp(2 x3^k / k!) Id_3: first nonzero transverse derivative of phi at order k."""
    coef = np.zeros(k + 1)
    coef[k] = 1.0 / math.factorial(k)
    return conformal_metric(coef)


def product_metric(d3, g2=None, d33=None):
    """blockdiag(g2(x') + x3 D + x3^2/2 E, 1) with constant 2x2 blocks D = d_3 g, E = d_33 g."""
    D = np.asarray(d3, dtype=float).reshape(2, 2)
    E = np.zeros((2, 2)) if d33 is None else np.asarray(d33, dtype=float).reshape(2, 2)
    base = g2 if g2 is not None else identity_metric(2)

    def sampler(x):
        t = x[..., 2][..., None, None]
        out = np.zeros(x.shape[:-1] + (3, 3))
        out[..., :2, :2] = base(x[..., :2]) + t * D + 0.5 * t**2 * E
        out[..., 2, 2] = 1.0
        return out

    def jet(x):
        g2v, dg2, d2g2 = base.derivatives(x[..., :2])
        t = x[..., 2][..., None, None]
        shape = x.shape[:-1]
        g = np.zeros(shape + (3, 3))
        g[..., :2, :2] = g2v + t * D + 0.5 * t**2 * E
        g[..., 2, 2] = 1.0
        dg = np.zeros(shape + (3, 3, 3))
        dg[..., :2, :2, :2] = dg2
        dg[..., 2, :2, :2] = D + t * E
        d2g = np.zeros(shape + (3, 3, 3, 3))
        d2g[..., :2, :2, :2, :2] = d2g2
        d2g[..., 2, 2, :2, :2] = E
        return g, dg, d2g

    params = {"metric": "product", "d3": D.tolist(), "d33": E.tolist()}
    params.update({f"g2_{k}": v for k, v in base.params.items()})
    return MetricField(sampler, 3, jet, name="product", smoothness=99, params=params)


def edge_growth_metric(f, eps):
    """blockdiag(Id_2 + 2 eps^2 f(x2) dx1^2, 1) with f a polynomial in x2 (ascending coefficients)."""
    coef = np.asarray(f, dtype=float)
    c1 = P.polyder(coef) if coef.size > 1 else np.zeros(1)
    c2 = P.polyder(c1) if c1.size > 1 else np.zeros(1)
    s = 2.0 * eps**2

    def sampler(x):
        out = np.broadcast_to(np.eye(3), x.shape[:-1] + (3, 3)).copy()
        out[..., 0, 0] += s * P.polyval(x[..., 1], coef)
        return out

    def jet(x):
        shape = x.shape[:-1]
        dg = np.zeros(shape + (3, 3, 3))
        d2g = np.zeros(shape + (3, 3, 3, 3))
        dg[..., 1, 0, 0] = s * P.polyval(x[..., 1], c1)
        d2g[..., 1, 1, 0, 0] = s * P.polyval(x[..., 1], c2)
        return sampler(x), dg, d2g

    return MetricField(sampler, 3, jet, name="edge-growth", smoothness=99,
                       params={"metric": "edge-growth", "f": coef.tolist(), "eps": float(eps)})


def edge_growth_metric_2d(f, eps):
    return edge_growth_metric(f, eps).restricted()


def codazzi_metric(c):
    """blockdiag(Id_2 + 2 c x3 x2 dx1^2, 1).

    The midplate is flat and d_3 g(., 0) has zero determinant, so
    R_12,12 = 0, while d_2 (c x2) != 0 breaks Codazzi: R_12,13 = -c.
    """
    c = float(c)

    def sampler(x):
        out = np.broadcast_to(np.eye(3), x.shape[:-1] + (3, 3)).copy()
        out[..., 0, 0] += 2 * c * x[..., 2] * x[..., 1]
        return out

    def jet(x):
        shape = x.shape[:-1]
        dg = np.zeros(shape + (3, 3, 3))
        d2g = np.zeros(shape + (3, 3, 3, 3))
        dg[..., 1, 0, 0] = 2 * c * x[..., 2]
        dg[..., 2, 0, 0] = 2 * c * x[..., 1]
        d2g[..., 1, 2, 0, 0] = d2g[..., 2, 1, 0, 0] = 2 * c
        return sampler(x), dg, d2g

    return MetricField(sampler, 3, jet, name="codazzi", smoothness=99, params={"metric": "codazzi", "c": c})


def spherical_cap_2d(kappa):
    """dr^2 + S(r)^2 dtheta^2 with constant Gauss curvature kappa; x1 = r, x2 = theta."""
    k = float(kappa)

    def profile(r):
        if k > 0:
            q = math.sqrt(k)
            return np.sin(q * r) / q, np.cos(q * r), -q * np.sin(q * r)
        if k < 0:
            q = math.sqrt(-k)
            return np.sinh(q * r) / q, np.cosh(q * r), q * np.sinh(q * r)
        return r, np.ones_like(r), np.zeros_like(r)

    def sampler(x):
        S, _, _ = profile(x[..., 0])
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = S**2
        return out

    def jet(x):
        S, S1, S2 = profile(x[..., 0])
        shape = x.shape[:-1]
        dg = np.zeros(shape + (2, 2, 2))
        d2g = np.zeros(shape + (2, 2, 2, 2))
        dg[..., 0, 1, 1] = 2 * S * S1
        d2g[..., 0, 0, 1, 1] = 2 * (S1**2 + S * S2)
        return sampler(x), dg, d2g

    return MetricField(sampler, 2, jet, name="spherical-cap", smoothness=99,
                       params={"metric": "spherical-cap", "kappa": k})


def spherical_cap_metric(kappa):
    g = product_metric(np.zeros((2, 2)), g2=spherical_cap_2d(kappa))
    return MetricField(g.sampler, 3, g.jet, name="spherical-cap", smoothness=99,
                       params={"metric": "spherical-cap", "kappa": float(kappa)})


@dataclass(frozen=True)
class Surface:
    """An analytic parametrized surface with its unit normal and normal gradient."""

    position: Callable
    tangents: Callable
    normal: Callable
    normal_grad: Callable
    name: str = "surface"
    params: dict = field(default_factory=dict, compare=False)

    def sample(self, grid):
        pts = grid.points
        return self.position(pts)


def plane_surface():
    def position(x):
        return np.concatenate([x, np.zeros(x.shape[:-1] + (1,))], axis=-1)

    def tangents(x):
        t = np.zeros(x.shape[:-1] + (3, 2))
        t[..., 0, 0] = t[..., 1, 1] = 1.0
        return t

    def normal(x):
        n = np.zeros(x.shape[:-1] + (3,))
        n[..., 2] = 1.0
        return n

    return Surface(position, tangents, normal, lambda x: np.zeros(x.shape[:-1] + (3, 2)),
                   "plane", {"surface": "plane"})


def cylinder_surface(radius=1.0):
    R = float(radius)

    def position(x):
        a = x[..., 0] / R
        return np.stack([R * np.cos(a), R * np.sin(a), x[..., 1]], axis=-1)

    def tangents(x):
        a = x[..., 0] / R
        t = np.zeros(x.shape[:-1] + (3, 2))
        t[..., 0, 0], t[..., 1, 0] = -np.sin(a), np.cos(a)
        t[..., 2, 1] = 1.0
        return t

    def normal(x):
        a = x[..., 0] / R
        return np.stack([np.cos(a), np.sin(a), np.zeros_like(a)], axis=-1)

    def normal_grad(x):
        return tangents(x) * np.array([1.0 / R, 0.0])

    return Surface(position, tangents, normal, normal_grad, "cylinder",
                   {"surface": "cylinder", "radius": R})


def sphere_surface(radius=1.0):
    """Upper hemisphere as a graph over |x'| < radius, outward normal."""
    R = float(radius)

    def position(x):
        z = np.sqrt(R**2 - np.sum(x**2, axis=-1))
        return np.concatenate([x, z[..., None]], axis=-1)

    def tangents(x):
        z = np.sqrt(R**2 - np.sum(x**2, axis=-1))
        t = np.zeros(x.shape[:-1] + (3, 2))
        t[..., 0, 0] = t[..., 1, 1] = 1.0
        t[..., 2, 0] = -x[..., 0] / z
        t[..., 2, 1] = -x[..., 1] / z
        return t

    def normal(x):
        return position(x) / R

    def normal_grad(x):
        return tangents(x) / R

    return Surface(position, tangents, normal, normal_grad, "sphere",
                   {"surface": "sphere", "radius": R})


SURFACES = {"plane": plane_surface, "cylinder": cylinder_surface, "sphere": sphere_surface}


def immersion_metric(surface, exact=True):
    """Metric of the shell generated by a surface.

    ``exact=True`` gives the pullback of the Euclidean metric under
    (x', x3) -> y(x') + x3 N(x'), i.e. I + 2 x3 II + x3^2 III: flat, hence
    compatible at every order.  ``exact=False`` truncates after the linear
    term, which keeps (R12) but breaks the next order.
    """

    def sampler(x):
        xp = x[..., :2]
        t3 = x[..., 2][..., None, None]
        T = surface.tangents(xp)
        dN = surface.normal_grad(xp)
        first = np.einsum("...ka,...kb->...ab", T, T)
        second = 0.5 * (np.einsum("...ka,...kb->...ab", T, dN) + np.einsum("...ka,...kb->...ab", dN, T))
        out = np.zeros(x.shape[:-1] + (3, 3))
        block = first + 2 * t3 * second
        if exact:
            block = block + t3**2 * np.einsum("...ka,...kb->...ab", dN, dN)
        out[..., :2, :2] = block
        out[..., 2, 2] = 1.0
        return out

    params = {"metric": "immersion", "exact": bool(exact)}
    params.update(surface.params)
    return MetricField(sampler, 3, None, name=f"immersion-{surface.name}", smoothness=99,
                       params=params)


def tabulated_metric(x1, x2, x3, values, step=FD_STEP, smoothness=2):
    """Metric interpolated (tricubic) from samples on a tensor grid; values (n1, n2, n3, 3, 3)."""
    from scipy.interpolate import RegularGridInterpolator

    vals = np.asarray(values, dtype=float).reshape(len(x1), len(x2), len(x3), 9)
    method = "cubic" if min(len(x1), len(x2), len(x3)) >= 4 else "linear"
    interp = RegularGridInterpolator((x1, x2, x3), vals, method=method, bounds_error=False, fill_value=None)

    def sampler(x):
        out = interp(x.reshape(-1, 3)).reshape(x.shape[:-1] + (3, 3))
        return 0.5 * (out + np.swapaxes(out, -1, -2))

    return MetricField(sampler, 3, None, step, name="tabulated", smoothness=smoothness,
                       params={"metric": "tabulated"})


# ---------------------------------------------------------------------------
# connection and curvature

def _christoffel_from(g, dg):
    ginv = np.linalg.inv(g)
    # lowered symbols G_lij = 1/2 (d_i g_jl + d_j g_il - d_l g_ij)
    low = 0.5 * (np.einsum("...ijl->...lij", dg) + np.einsum("...jil->...lij", dg) - dg)
    return np.einsum("...kl,...lij->...kij", ginv, low)


def christoffel(g, x, order=0):
    """Christoffel symbols G[..., k, i, j]; with ``order=1`` also their x-derivatives."""
    x = np.asarray(x, dtype=float)
    gv, dg, _ = g.derivatives(x)
    _require_nonsingular(gv)
    gam = _christoffel_from(gv, dg)
    if order == 0:
        return gam
    if order != 1:
        raise ValueError("christoffel supports derivative order 0 or 1")
    step = g.step
    dgam = np.empty(x.shape[:-1] + (g.dim,) * 4)
    for a in range(g.dim):
        e = np.zeros(g.dim)
        e[a] = step
        gp = _christoffel_from(*g.derivatives(x + e)[:2])
        gm = _christoffel_from(*g.derivatives(x - e)[:2])
        dgam[..., a, :, :, :] = (gp - gm) / (2 * step)
    return gam, dgam


def _require_nonsingular(g):
    det = np.linalg.det(g)
    if np.any(np.abs(det) <= 1e-300) or not np.all(np.isfinite(det)):
        raise MetricError("metric is singular at a sample point")


def riemann_from_jet(g, dg, d2g):
    _require_nonsingular(g)
    gam = _christoffel_from(g, dg)
    t1 = 0.5 * (np.einsum("...klim->...iklm", d2g) + np.einsum("...imkl->...iklm", d2g)
                - np.einsum("...kmil->...iklm", d2g) - np.einsum("...ilkm->...iklm", d2g))
    t2 = (np.einsum("...np,...nkl,...pim->...iklm", g, gam, gam)
          - np.einsum("...np,...nkm,...pil->...iklm", g, gam, gam))
    return t1 + t2


def riemann(g, x):
    """Fully covariant Riemann tensor R[..., i, k, l, m] at points x."""
    return riemann_from_jet(*g.derivatives(np.asarray(x, dtype=float)))


def gauss_curvature(g2, x):
    """Gauss curvature of a two-dimensional metric at points x (..., 2)."""
    if g2.dim != 2:
        raise ValueError("gauss_curvature needs a 2D metric")
    gv, dg, d2g = g2.derivatives(np.asarray(x, dtype=float))
    R = riemann_from_jet(gv, dg, d2g)
    return R[..., 0, 1, 0, 1] / np.linalg.det(gv)


def riemann_symmetry_defect(R):
    """Largest violation of the pair antisymmetries and the pair-interchange symmetry."""
    d1 = np.abs(R + np.swapaxes(R, -4, -3))
    d2 = np.abs(R + np.swapaxes(R, -2, -1))
    d3 = np.abs(R - np.moveaxis(R, (-4, -3), (-2, -1)))
    return float(max(d1.max(), d2.max(), d3.max()))


# ---------------------------------------------------------------------------
# immersions

@dataclass(frozen=True)
class SurfaceImmersion:
    y: np.ndarray
    grid: Grid
    b: Optional[np.ndarray] = None
    dy: Optional[np.ndarray] = None  # exact gradient, when the map carries unresolved oscillations

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        object.__setattr__(self, "y", y)
        if y.shape != tuple(self.grid.shape) + (3,):
            raise ValueError(f"immersion shape {y.shape} does not match grid {self.grid.shape}")
        if self.b is not None:
            b = np.asarray(self.b, dtype=float)
            if b.shape != y.shape:
                raise ValueError("director field and immersion live on different grids")
            object.__setattr__(self, "b", b)
        if self.dy is not None:
            dy = np.asarray(self.dy, dtype=float)
            if dy.shape != y.shape + (2,):
                raise ValueError("gradient field does not match the immersion")
            object.__setattr__(self, "dy", dy)

    @classmethod
    def from_surface(cls, surface, grid, with_normal=False):
        pts = grid.points
        y = surface.position(pts)
        return cls(y, grid, surface.normal(pts) if with_normal else None)

    @property
    def gradient(self):
        if self.dy is not None:
            return self.dy
        return grad(self.y, self.grid)

    def with_director(self, b):
        return SurfaceImmersion(self.y, self.grid, b, self.dy)


def unit_normal(dy, where="immersion"):
    """Unit normal from a per-node 3x2 tangent matrix; rejects degenerate tangent planes."""
    n = np.cross(dy[..., 0], dy[..., 1])
    norm = np.linalg.norm(n, axis=-1)
    scale = np.linalg.norm(dy[..., 0], axis=-1) * np.linalg.norm(dy[..., 1], axis=-1)
    bad = norm <= 1e-12 * np.maximum(scale, 1e-300)
    if np.any(bad):
        node = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"degenerate tangent plane in {where} at node {node}")
    return n / norm[..., None], norm


def fundamental_forms(imm):
    """First and second fundamental forms, II = (grad y)^T grad N, per node."""
    dy = imm.gradient
    N, _ = unit_normal(dy)
    dN = grad(N, imm.grid)
    first = np.einsum("...ka,...kb->...ab", dy, dy)
    second = np.einsum("...ka,...kb->...ab", dy, dN)
    return first, 0.5 * (second + np.swapaxes(second, -1, -2))


def principal_curvatures(first, second):
    """Eigenvalues of I^{-1} II per node, ascending."""
    shape_op = np.linalg.solve(first, second)
    return np.sort(np.linalg.eigvals(shape_op).real, axis=-1)


# ---------------------------------------------------------------------------
# compatibility and quantization

@dataclass
class CurvatureReport:
    r12: dict
    transverse: Optional[np.ndarray] = None
    sup: dict = field(default_factory=dict)
    tol: float = 0.0
    compatible: Optional[bool] = None
    symmetry_defect: float = 0.0

    def __post_init__(self):
        for key, arr in self.r12.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite curvature component {key}")
        if self.transverse is not None and not np.all(np.isfinite(self.transverse)):
            raise ValueError("non-finite transverse curvature block")
        for key, arr in self.r12.items():
            self.sup.setdefault(key, float(np.max(np.abs(arr))) if arr.size else 0.0)

    @property
    def curvature_block(self):
        """The 2x2 matrix [R_13,13 R_13,23; R_13,23 R_23,23] per node (k = 0 slice)."""
        if self.transverse is None:
            raise ValueError("report carries no transverse block")
        return self.transverse[0]


def compat_tolerance(d2g):
    return max(COMPAT_FACTOR * float(np.max(np.abs(d2g))), COMPAT_FLOOR)


def kirchhoff_compatibility(g, grid, tol=None):
    """Evaluate R_12,12, R_12,13, R_12,23 at x3 = 0 on the grid nodes."""
    gv, dg, d2g = g.derivatives(grid_points3(grid, 0.0))
    R = riemann_from_jet(gv, dg, d2g)
    comps = {key: R[(...,) + idx] for key, idx in R12_COMPONENTS.items()}
    tol = compat_tolerance(d2g) if tol is None else float(tol)
    block = np.stack([np.stack([R[..., 0, 2, 0, 2], R[..., 0, 2, 1, 2]], -1),
                      np.stack([R[..., 0, 2, 1, 2], R[..., 1, 2, 1, 2]], -1)], -2)
    scale = max(float(np.max(np.abs(R))), 1.0)
    report = CurvatureReport(comps, block[None], tol=tol,
                             symmetry_defect=riemann_symmetry_defect(R) / scale)
    report.compatible = all(v < tol for v in report.sup.values())
    return report


def transverse_curvature_derivatives(g, grid, k_max, radius=0.2, degree=18):
    """d_3^k of the block [R_i3,j3] at x3 = 0 for k = 0..k_max, shape (k_max+1, n1, n2, 2, 2).

    The block is sampled on Chebyshev points in x3 in [-radius, radius],
    fitted by a Chebyshev series in x3 and differentiated at 0.
    """
    m = degree + 1
    t = np.cos(np.pi * (np.arange(m) + 0.5) / m)
    samples = []
    for tj in t:
        R = riemann(g, grid_points3(grid, radius * tj))
        samples.append(R[..., :2, 2, :2, 2])
    samples = np.stack(samples)  # (m, n1, n2, 2, 2)
    flat = samples.reshape(m, -1)
    coef = C.chebfit(t, flat, degree)
    out = []
    for k in range(k_max + 1):
        ck = C.chebder(coef, k) if k else coef
        out.append(C.chebval(0.0, ck) / radius**k)
    return np.stack(out).reshape((k_max + 1,) + samples.shape[1:])


@dataclass
class QuantizationResult:
    order: Optional[int]
    exponent: Optional[int]
    report: CurvatureReport
    block: Optional[np.ndarray]
    sup_norms: list

    @property
    def saturated(self):
        return self.order is None


def quantization_order(g, n_max, grid, tol=None):
    """First order n >= 1 at which the curvature conditions for h^{2(n+1)} fail.

    At n = 1 the condition is (R12); at n >= 2 it additionally asks
    d_3^{(n-2)} [R_i3,j3](., 0) = 0.  Failure at n means the energy scales
    exactly like h^{2n}.  Returns ``order=None`` when nothing fails up to
    ``n_max``.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    if g.smoothness < n_max + 1:
        raise ValueError(f"metric supports {g.smoothness} transverse derivatives, {n_max + 1} needed")
    report = kirchhoff_compatibility(g, grid, tol)
    sups = [max(report.sup.values())]
    if not report.compatible:
        block = np.stack([report.r12[k] for k in R12_COMPONENTS], -1)
        return QuantizationResult(1, 2, report, block, sups)
    if n_max == 1:
        return QuantizationResult(None, None, report, None, sups)
    derivs = transverse_curvature_derivatives(g, grid, n_max - 2)
    report.transverse = derivs
    tol_k = report.tol if tol is None else float(tol)
    for n in range(2, n_max + 1):
        block = derivs[n - 2]
        sup = float(np.max(np.abs(block)))
        sups.append(sup)
        if sup >= max(tol_k, 1e-9):
            return QuantizationResult(n, 2 * n, report, block, sups)
    return QuantizationResult(None, None, report, None, sups)
