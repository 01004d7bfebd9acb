"""Rectangular grids on the midplate and their differentiation/quadrature operators.

Two node layouts are supported:

* ``uniform``  -- equispaced nodes with second-order finite differences
  (central in the interior, one-sided second order at free edges, circulant
  on periodic grids).  Used by the von Karman, Monge-Ampere and growth code.
* ``chebyshev`` -- Chebyshev-Gauss-Lobatto nodes with spectral
  differentiation and Clenshaw-Curtis weights.  Used by the 3D thin-film
  energy, where collocated central differences decouple the four
  sublattices of the grid and let a minimizer build incompatible frames.

All derivative operators are 1D matrices (sparse on uniform grids, dense on
Chebyshev ones) applied along one axis, so their adjoints (needed for
analytic gradients) are plain transposes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse

BOUNDARY_POLICIES = ("free", "clamped", "periodic")
GRID_KINDS = ("uniform", "chebyshev")
MIN_NODES = 8


@dataclass(frozen=True)
class Grid:
    bounds: tuple = (-0.5, 0.5, -0.5, 0.5)
    shape: tuple = (16, 16)
    boundary: str = "free"
    kind: str = "uniform"

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        a1, b1, a2, b2 = self.bounds
        if not (b1 > a1 and b2 > a2):
            raise ValueError(f"degenerate grid bounds {self.bounds}")
        if len(self.shape) != 2 or min(self.shape) < MIN_NODES:
            raise ValueError(f"grid needs at least {MIN_NODES} nodes per axis, got {self.shape}")
        if self.boundary not in BOUNDARY_POLICIES:
            raise ValueError(f"unknown boundary policy {self.boundary!r}")
        if self.kind not in GRID_KINDS:
            raise ValueError(f"unknown grid kind {self.kind!r}")
        if self.boundary == "periodic" and self.kind != "uniform":
            raise ValueError("periodic grids must be uniform")

    @classmethod
    def square(cls, n, half_width=0.5, **kw):
        return cls((-half_width, half_width, -half_width, half_width), (n, n), **kw)

    @property
    def periodic(self):
        return self.boundary == "periodic"

    @property
    def lengths(self):
        a1, b1, a2, b2 = self.bounds
        return (b1 - a1, b2 - a2)

    @property
    def area(self):
        l1, l2 = self.lengths
        return l1 * l2

    @cached_property
    def axes(self):
        return tuple(self._nodes(ax) for ax in (0, 1))

    def _nodes(self, axis):
        a, b = self.bounds[2 * axis], self.bounds[2 * axis + 1]
        n = self.shape[axis]
        if self.kind == "chebyshev":
            t = -np.cos(np.pi * np.arange(n) / (n - 1))
            return a + 0.5 * (b - a) * (t + 1.0)
        if self.periodic:
            return a + (b - a) * np.arange(n) / n
        return np.linspace(a, b, n)

    @property
    def x1(self):
        return self.axes[0]

    @property
    def x2(self):
        return self.axes[1]

    @cached_property
    def mesh(self):
        return np.meshgrid(self.x1, self.x2, indexing="ij")

    @property
    def points(self):
        """Node coordinates, shape (n1, n2, 2)."""
        return np.stack(self.mesh, axis=-1)

    @property
    def spacing(self):
        """Smallest node spacing along each axis."""
        if self.periodic:
            return tuple(l / n for l, n in zip(self.lengths, self.shape))
        return tuple(float(np.min(np.diff(x))) for x in self.axes)

    @cached_property
    def weights(self):
        """Nodal quadrature weights on the rectangle, shape (n1, n2)."""
        w1, w2 = (self._weights_1d(ax) for ax in (0, 1))
        return np.outer(w1, w2)

    def _weights_1d(self, axis):
        n = self.shape[axis]
        length = self.lengths[axis]
        if self.kind == "chebyshev":
            return 0.5 * length * _clenshaw_curtis(n)
        if self.periodic:
            return np.full(n, length / n)
        w = np.full(n, length / (n - 1))
        w[[0, -1]] *= 0.5
        return w

    @cached_property
    def _diff(self):
        return tuple(self._diff_1d(ax) for ax in (0, 1))

    def diff_matrix(self, axis, order=1):
        d1, d2 = self._diff[axis]
        return d1 if order == 1 else d2

    def _diff_1d(self, axis):
        n = self.shape[axis]
        if self.kind == "chebyshev":
            d = _cheb_matrix(n) * (2.0 / self.lengths[axis])
            return d, d @ d
        dx = self.spacing[axis]
        d1 = sparse.lil_matrix((n, n))
        d2 = sparse.lil_matrix((n, n))
        idx = np.arange(n)
        if self.periodic:
            d1[idx, (idx + 1) % n] = 0.5 / dx
            d1[idx, (idx - 1) % n] = -0.5 / dx
            d2[idx, (idx + 1) % n] = 1.0 / dx**2
            d2[idx, (idx - 1) % n] = 1.0 / dx**2
            d2[idx, idx] = -2.0 / dx**2
            return sparse.csr_matrix(d1), sparse.csr_matrix(d2)
        inner = idx[1:-1]
        d1[inner, inner + 1] = 0.5 / dx
        d1[inner, inner - 1] = -0.5 / dx
        d1[0, :3] = np.array([-3.0, 4.0, -1.0]) / (2 * dx)
        d1[-1, -3:] = np.array([1.0, -4.0, 3.0]) / (2 * dx)
        d2[inner, inner + 1] = 1.0 / dx**2
        d2[inner, inner - 1] = 1.0 / dx**2
        d2[inner, inner] = -2.0 / dx**2
        d2[0, :4] = np.array([2.0, -5.0, 4.0, -1.0]) / dx**2
        d2[-1, -4:] = np.array([-1.0, 4.0, -5.0, 2.0]) / dx**2
        return sparse.csr_matrix(d1), sparse.csr_matrix(d2)

    def interior(self, margin=1):
        """Boolean mask of nodes at least ``margin`` nodes away from a free edge."""
        mask = np.ones(self.shape, dtype=bool)
        if self.periodic or margin <= 0:
            return mask
        mask[:margin] = mask[-margin:] = False
        mask[:, :margin] = mask[:, -margin:] = False
        return mask

    def boundary_mask(self):
        return ~self.interior(1)

    def integrate(self, f):
        """Quadrature of a nodal scalar field (or stack of fields on the leading axes)."""
        return float(np.sum(self.weights * f))


def apply_along(mat, field, axis):
    """Apply a 1D operator to ``field`` along grid axis 0 or 1."""
    field = np.asarray(field, dtype=float)
    moved = np.moveaxis(field, axis, 0)
    flat = moved.reshape(moved.shape[0], -1)
    out = mat @ flat
    return np.moveaxis(np.asarray(out).reshape(moved.shape), 0, axis)


def grad(field, grid):
    """Gradient with the derivative direction as the last axis.

    A scalar field (n1, n2) gives (n1, n2, 2); a vector field (n1, n2, 3)
    gives the 3x2 matrix ``nabla y`` per node, shape (n1, n2, 3, 2).
    """
    field = np.asarray(field, dtype=float)
    return np.stack([apply_along(grid.diff_matrix(ax), field, ax) for ax in (0, 1)], axis=-1)


def grad_adjoint(r, grid):
    """Adjoint of :func:`grad`: maps a cotangent (..., 2) back to nodal values."""
    return sum(apply_along(grid.diff_matrix(ax).T, r[..., ax], ax) for ax in (0, 1))


def hess(v, grid):
    """Hessian of a scalar (or stacked) field, last two axes 2x2."""
    v = np.asarray(v, dtype=float)
    d11 = apply_along(grid.diff_matrix(0, 2), v, 0)
    d22 = apply_along(grid.diff_matrix(1, 2), v, 1)
    d12 = apply_along(grid.diff_matrix(1), apply_along(grid.diff_matrix(0), v, 0), 1)
    return np.stack([np.stack([d11, d12], -1), np.stack([d12, d22], -1)], -2)


def hess_adjoint(r, grid):
    """Adjoint of :func:`hess` for a cotangent with trailing 2x2 axes."""
    out = apply_along(grid.diff_matrix(0, 2).T, r[..., 0, 0], 0)
    out = out + apply_along(grid.diff_matrix(1, 2).T, r[..., 1, 1], 1)
    mixed = r[..., 0, 1] + r[..., 1, 0]
    out = out + apply_along(grid.diff_matrix(0).T, apply_along(grid.diff_matrix(1).T, mixed, 1), 0)
    return out


def fd_grad(field, grid):
    """Second-order finite-difference gradient on a uniform grid."""
    _require_uniform(grid)
    return grad(field, grid)


def fd_hess(v, grid):
    """Second-order finite-difference Hessian on a uniform grid, exact on quadratics."""
    _require_uniform(grid)
    return hess(v, grid)


def _require_uniform(grid):
    if grid.kind != "uniform":
        raise ValueError("finite-difference stencils need a uniform grid")


def _cheb_matrix(n):
    """Chebyshev differentiation matrix on ascending Gauss-Lobatto nodes in [-1, 1]."""
    N = n - 1
    x = -np.cos(np.pi * np.arange(n) / N)
    c = np.ones(n)
    c[[0, -1]] = 2.0
    c *= (-1.0) ** np.arange(n)
    dx = x[:, None] - x[None, :]
    d = np.outer(c, 1.0 / c) / (dx + np.eye(n))
    d -= np.diag(d.sum(axis=1))
    return d


def _clenshaw_curtis(n):
    """Clenshaw-Curtis weights on [-1, 1] for n Gauss-Lobatto nodes."""
    N = n - 1
    theta = np.pi * np.arange(n) / N
    w = np.zeros(n)
    v = np.ones(N - 1)
    if N % 2 == 0:
        w[0] = w[N] = 1.0 / (N**2 - 1)
        for k in range(1, N // 2):
            v -= 2.0 * np.cos(2 * k * theta[1:-1]) / (4 * k**2 - 1)
        v -= np.cos(N * theta[1:-1]) / (N**2 - 1)
    else:
        w[0] = w[N] = 1.0 / N**2
        for k in range(1, (N - 1) // 2 + 1):
            v -= 2.0 * np.cos(2 * k * theta[1:-1]) / (4 * k**2 - 1)
    w[1:-1] = 2.0 * v / N
    return w
