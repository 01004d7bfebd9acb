import numpy as np
import pytest

from prestrain.grid import Grid, fd_hess, grad, grad_adjoint, hess, hess_adjoint


def test_rejects_small_and_degenerate_grids():
    with pytest.raises(ValueError):
        Grid.square(4)
    with pytest.raises(ValueError):
        Grid((0, 0, 0, 1), (8, 8))
    with pytest.raises(ValueError):
        Grid.square(8, boundary="periodic", kind="chebyshev")


def test_quadratic_hessian_exact(grid16):
    X, Y = grid16.mesh
    H = fd_hess(X * Y, grid16)
    m = grid16.interior()
    assert np.max(np.abs(H[m] - np.array([[0.0, 1.0], [1.0, 0.0]]))) < 1e-12


def test_constant_has_zero_derivatives(grid16):
    c = np.full(grid16.shape, 3.7)
    assert np.max(np.abs(grad(c, grid16))) < 1e-12
    assert np.max(np.abs(hess(c, grid16))) < 1e-10


def test_sin_refinement_order():
    errs = []
    for n in (16, 32, 64):
        g = Grid.square(n)
        X, _ = g.mesh
        H = fd_hess(np.sin(X), g)
        m = g.interior()
        errs.append(np.max(np.abs(H[..., 0, 0][m] + np.sin(X)[m])))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.9)


def test_fd_needs_uniform_grid():
    g = Grid.square(12, kind="chebyshev")
    with pytest.raises(ValueError):
        fd_hess(np.zeros(g.shape), g)


@pytest.mark.parametrize("kind", ["uniform", "chebyshev"])
def test_adjoints(kind, rng):
    g = Grid.square(10, kind=kind)
    f = rng.standard_normal(g.shape)
    r = rng.standard_normal(g.shape + (2,))
    assert np.isclose(np.sum(grad(f, g) * r), np.sum(f * grad_adjoint(r, g)))
    R = rng.standard_normal(g.shape + (2, 2))
    assert np.isclose(np.sum(hess(f, g) * R), np.sum(f * hess_adjoint(R, g)))


def test_chebyshev_spectral_accuracy():
    g = Grid.square(16, half_width=1.0, kind="chebyshev")
    X, Y = g.mesh
    d = grad(np.exp(X) * np.sin(Y), g)
    assert np.max(np.abs(d[..., 0] - np.exp(X) * np.sin(Y))) < 1e-9
    assert abs(g.integrate(X**2 * Y**2) - 4.0 / 9.0) < 1e-12


def test_periodic_grid_spacing_and_area():
    g = Grid((0, 2 * np.pi, 0, 2 * np.pi), (16, 16), boundary="periodic")
    assert np.isclose(g.area, 4 * np.pi**2)
    assert g.interior(3).all()
    X, _ = g.mesh
    assert abs(g.integrate(np.cos(X) ** 2) - 2 * np.pi**2) < 1e-12
