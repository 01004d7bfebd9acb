import math

import numpy as np
import pytest

from prestrain.geometry import (MetricError, MetricField, SurfaceImmersion, christoffel, codazzi_metric,
                                conformal_metric, conformal_monomial, cylinder_surface,
                                edge_growth_metric_2d, fundamental_forms, gauss_curvature,
                                identity_metric, immersion_metric, kirchhoff_compatibility,
                                metric_sqrt, plane_surface, principal_curvatures, product_metric,
                                quantization_order, riemann, riemann_symmetry_defect,
                                spherical_cap_2d, sphere_surface, tabulated_metric)
from prestrain.grid import Grid

X0 = np.array([0.1, -0.2, 0.0])


def test_metric_sqrt_cases(rng):
    assert np.allclose(metric_sqrt(np.eye(3)), np.eye(3))
    assert np.allclose(metric_sqrt(np.diag([4.0, 9.0, 1.0])), np.diag([2.0, 3.0, 1.0]))
    M = rng.standard_normal((20, 3, 3))
    G = np.swapaxes(M, -1, -2) @ M + np.eye(3)
    A = metric_sqrt(G)
    assert np.max(np.abs(A @ A - G)) < 1e-12
    assert np.max(np.abs(A - np.swapaxes(A, -1, -2))) < 1e-14


def test_metric_sqrt_rejects_bad_input():
    with pytest.raises(MetricError):
        metric_sqrt(np.array([[1.0, 2.0, 0], [0, 1, 0], [0, 0, 1]]))
    with pytest.raises(MetricError, match="eigenvalue"):
        metric_sqrt(np.diag([1.0, -1.0, 1.0]))


def test_christoffel_flat_and_conformal():
    assert np.max(np.abs(christoffel(identity_metric(), X0))) == 0.0
    G = christoffel(conformal_metric([0.0, 1.0]), X0)
    assert abs(G[2, 0, 0] + 1.0) < 1e-12
    assert abs(G[0, 0, 2] - 1.0) < 1e-12
    assert abs(G[0, 2, 0] - 1.0) < 1e-12


def test_christoffel_vanishing_first_derivatives():
    def sampler(x):
        out = np.broadcast_to(np.eye(3), x.shape[:-1] + (3, 3)).copy()
        out[..., 2, 2] += x[..., 2] ** 2
        return out

    assert np.max(np.abs(christoffel(MetricField(sampler, smoothness=99), X0))) < 1e-8


def test_riemann_flat_and_conformal_sign():
    assert np.max(np.abs(riemann(identity_metric(), X0))) == 0.0
    R = riemann(conformal_monomial(2), X0)
    assert abs(R[0, 2, 0, 2] + 1.0) < 1e-10
    assert riemann_symmetry_defect(R) < 1e-12


def test_pullback_of_flat_metric_is_flat():
    def jac(x):
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        J = np.zeros(x.shape[:-1] + (3, 3))
        # phi(x) = (x1 + 0.2 x2^2, x2 + 0.1 x1 x3, x3 + 0.3 x1^2)
        J[..., 0, 0] = 1.0
        J[..., 0, 1] = 0.4 * x2
        J[..., 1, 0] = 0.1 * x3
        J[..., 1, 1] = 1.0
        J[..., 1, 2] = 0.1 * x1
        J[..., 2, 0] = 0.6 * x1
        J[..., 2, 2] = 1.0
        return J

    g = MetricField(lambda x: np.swapaxes(jac(x), -1, -2) @ jac(x), smoothness=99)
    pts = np.array([[0.1, -0.2, 0.05], [0.3, 0.2, -0.1], [-0.25, 0.1, 0.0]])
    assert np.max(np.abs(riemann(g, pts))) < 1e-8


def test_gauss_curvature_cases():
    x = np.array([[0.3, 0.2], [1.0, -0.4]])
    assert np.max(np.abs(gauss_curvature(identity_metric(2), x))) == 0.0
    K = gauss_curvature(spherical_cap_2d(0.0011), x)
    assert np.max(np.abs(K - 0.0011)) < 1e-6
    eps = 0.01
    K = gauss_curvature(edge_growth_metric_2d([0.0, 0.0, 1.0], eps), x)
    assert np.max(np.abs(K + 2 * eps**2)) < 10 * eps**4


def test_fundamental_forms_plane_sphere_cylinder():
    g = Grid.square(16, half_width=0.3, kind="chebyshev")
    I, II = fundamental_forms(SurfaceImmersion.from_surface(plane_surface(), g))
    assert np.allclose(I, np.eye(2)) and np.max(np.abs(II)) < 1e-12
    I, II = fundamental_forms(SurfaceImmersion.from_surface(sphere_surface(1.0), g))
    ratio = np.linalg.det(II) / np.linalg.det(I)
    assert np.max(np.abs(ratio - 1.0)) < 1e-6
    I, II = fundamental_forms(SurfaceImmersion.from_surface(cylinder_surface(1.0), g))
    assert np.max(np.abs(I - np.eye(2))) < 1e-9
    k = np.abs(principal_curvatures(I, II))
    k.sort(axis=-1)
    assert np.max(np.abs(k - np.array([0.0, 1.0]))) < 1e-8


def test_degenerate_tangent_plane_reports_node():
    g = Grid.square(8)
    y = np.zeros(g.shape + (3,))
    with pytest.raises(ValueError, match="node"):
        fundamental_forms(SurfaceImmersion(y, g))


def test_compatibility_cases(grid16):
    assert kirchhoff_compatibility(identity_metric(), grid16).compatible
    curved = product_metric(np.zeros((2, 2)), g2=spherical_cap_2d(1.0))
    g = Grid((0.2, 0.8, -0.3, 0.3), (12, 12))
    rep = kirchhoff_compatibility(curved, g)
    assert not rep.compatible
    assert rep.sup["12,12"] > 0.01
    assert kirchhoff_compatibility(immersion_metric(sphere_surface(1.0)), Grid.square(10, 0.3)).compatible
    rep = kirchhoff_compatibility(codazzi_metric(1.0), grid16)
    assert not rep.compatible
    assert np.allclose(np.abs(rep.r12["12,13"]), 1.0)
    assert rep.sup["12,12"] < 1e-12


def test_quantization_orders(grid16):
    assert quantization_order(identity_metric(), 4, grid16).saturated
    assert quantization_order(codazzi_metric(1.0), 4, grid16).exponent == 2
    q1 = quantization_order(conformal_monomial(1), 4, grid16)
    assert (q1.order, q1.exponent) == (1, 2)
    q2 = quantization_order(conformal_monomial(2), 4, grid16)
    assert (q2.order, q2.exponent) == (2, 4)
    q3 = quantization_order(conformal_metric([0.0, 0.0, 0.0, 1.0]), 4, grid16)
    assert (q3.order, q3.exponent) == (3, 6)
    qc = quantization_order(immersion_metric(cylinder_surface(1.0), exact=False), 4, Grid.square(10, 0.3))
    assert (qc.order, qc.exponent) == (2, 4)


def test_quantization_requires_smoothness(grid16):
    x = np.linspace(-1, 1, 5)
    vals = np.broadcast_to(np.eye(3), (5, 5, 5, 3, 3))
    with pytest.raises(ValueError, match="derivatives"):
        quantization_order(tabulated_metric(x, x, x, vals), 4, grid16)


def test_conformal_monomial_values():
    g = conformal_monomial(3)
    x = np.array([0.0, 0.0, 0.5])
    assert np.allclose(g(x), math.exp(2 * 0.5**3 / 6) * np.eye(3))
