import math

import numpy as np
import pytest
from scipy.optimize import minimize as sp_minimize
from scipy.spatial.transform import Rotation

from prestrain.energy import (DEFAULT_MODEL, ElasticModel, EnergyError, KirchhoffEnergy, KLDeformation,
                              ThinFilmEnergy, VKEnergy, VKState, build_recovery_h4, cosserat, density_W,
                              density_and_stress, energy3d, kirchhoff_energy, linear_energy,
                              mollified_recovery, q2, q2_identity, q3, solve_p, vk_energy,
                              vk_prestrained_energy)
from prestrain.geometry import (MetricField, SurfaceImmersion, conformal_monomial, cylinder_surface, identity_metric,
                                immersion_metric, plane_surface, product_metric, sphere_surface)
from prestrain.grid import Grid
from prestrain.minimize import grad_check


def flat(grid):
    return SurfaceImmersion.from_surface(plane_surface(), grid)


def test_density_cases():
    assert density_W(np.eye(3)) == 0.0
    R = Rotation.from_rotvec([0.3, -0.2, 0.7]).as_matrix()
    assert abs(density_W(R)) < 1e-14
    assert abs(density_W(np.diag([2.0, 1.0, 1.0])) - (1 + math.log(2) ** 2)) < 1e-14
    assert np.isinf(density_W(np.diag([1.0, 1.0, -1.0])))


@pytest.mark.parametrize("density", ["W1", "W2"])
def test_density_stress_matches_fd(density, rng):
    model = ElasticModel(density=density)
    F = np.eye(3) + 0.2 * rng.standard_normal((3, 3))
    _, P = density_and_stress(F, model)
    eps = 1e-6
    num = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            E = np.zeros((3, 3))
            E[i, j] = eps
            num[i, j] = (density_W(F + E, model) - density_W(F - E, model)) / (2 * eps)
    assert np.max(np.abs(num - P)) < 1e-7


def test_q3_cases(rng):
    assert q3(np.zeros((3, 3))) == 0.0
    K = rng.standard_normal((3, 3))
    assert abs(q3(K - K.T)) < 1e-14
    assert abs(q3(np.eye(3)) - 24.0) < 1e-12
    eps = 1e-4
    F = rng.standard_normal((3, 3))
    fd = (density_W(np.eye(3) + eps * F) + density_W(np.eye(3) - eps * F)) / eps**2
    assert abs(fd - q3(F)) < 1e-5 * max(1.0, q3(F))


def test_q2_identity_brute_force():
    F2 = np.eye(2)

    def extend(c):
        F = np.zeros((3, 3))
        F[:2, :2] = F2
        F[0, 2], F[1, 2], F[2, 2] = c
        return q3(F)

    brute = sp_minimize(extend, np.zeros(3), method="BFGS", options={"gtol": 1e-12}).fun
    val = q2(np.array([0.1, 0.2]), F2, identity_metric())
    assert abs(val - brute) < 1e-8
    assert abs(q2_identity(F2) - val) < 1e-12
    assert q2(np.array([0.0, 0.0]), np.array([[0.0, 1.0], [-1.0, 0.0]]), identity_metric()) < 1e-14


def test_energy3d_identity_and_rotation(grid16):
    g = identity_metric()
    u = KLDeformation.identity(grid16)
    for h in (0.2, 0.05):
        assert energy3d(u, g, h) < 1e-20
    R = Rotation.from_rotvec([0.2, 0.5, -0.1]).as_matrix()
    assert energy3d(u.transformed(R, np.array([1.0, 2.0, 3.0])), g, 0.1) < 1e-20


def test_energy3d_sentinel(grid16):
    u = KLDeformation.identity(grid16)
    flipped = KLDeformation(grid16, u.y0, (-u.directors[0], u.directors[1]))
    assert np.isinf(energy3d(flipped, identity_metric(), 0.1))


def test_conformal_energy_positive():
    grid = Grid.square(10, half_width=1.0, kind="chebyshev")
    u = KLDeformation.identity(grid)
    assert energy3d(u, conformal_monomial(2), 0.1) > 0


def test_cosserat_cases():
    grid = Grid.square(12, half_width=0.3, kind="chebyshev")
    b = cosserat(flat(grid), identity_metric())
    assert np.allclose(b, [0.0, 0.0, 1.0])

    def sampler(x):
        return np.broadcast_to(np.diag([1.0, 1.0, 4.0]), x.shape[:-1] + (3, 3)).copy()

    g4 = MetricField(sampler, smoothness=99)
    assert np.allclose(cosserat(flat(grid), g4), [0.0, 0.0, 2.0])
    sph = SurfaceImmersion.from_surface(sphere_surface(1.0), grid)
    g = immersion_metric(sphere_surface(1.0))
    b = cosserat(sph, g)
    B = np.concatenate([sph.gradient, b[..., None]], -1)
    assert np.max(np.abs(np.swapaxes(B, -1, -2) @ B - g.on_grid(grid))) < 1e-8


def test_kirchhoff_constant_case():
    grid = Grid.square(12, half_width=0.5, kind="chebyshev")
    c = 0.3
    g = product_metric(2 * c * np.eye(2))
    res = kirchhoff_energy(flat(grid), g)
    assert abs(res.value - grid.area * q2_identity(-c * np.eye(2)) / 24.0) < 1e-12
    assert res.warning is None
    assert kirchhoff_energy(flat(grid), identity_metric()).value == 0.0


def test_kirchhoff_cylinder_is_zero():
    grid = Grid.square(14, half_width=0.4, kind="chebyshev")
    cyl = SurfaceImmersion.from_surface(cylinder_surface(1.0), grid)
    res = kirchhoff_energy(cyl, immersion_metric(cylinder_surface(1.0)))
    assert abs(res.value) < 1e-8


def test_kirchhoff_isometry_warning():
    grid = Grid.square(10, kind="chebyshev")
    y = SurfaceImmersion(2.0 * flat(grid).y, grid)
    assert kirchhoff_energy(y, identity_metric()).warning is not None


def test_vk_cases(rng):
    grid = Grid.square(12, half_width=0.5, kind="chebyshev")
    X, Y = grid.mesh
    z = np.zeros(grid.shape)
    assert vk_energy(VKState(grid, v=z, w=np.zeros(grid.shape + (2,)))) == 0.0
    w = np.stack([1.0 + 0.3 * Y, 2.0 - 0.3 * X], -1)
    assert abs(vk_energy(VKState(grid, v=z, w=w))) < 1e-24
    v = X**2
    w = np.stack([-(2.0 / 3.0) * X**3, z], -1)
    bending = grid.area * q2_identity(np.diag([2.0, 0.0])) / 24.0
    assert abs(vk_energy(VKState(grid, v=v, w=w)) - bending) < 1e-10
    assert abs(linear_energy(v, grid) - bending) < 1e-10


def test_linear_energy_cases(rng):
    grid = Grid.square(12, half_width=0.5, kind="chebyshev")
    X, Y = grid.mesh
    assert abs(linear_energy(1 + 2 * X - Y, grid)) < 1e-20
    assert abs(linear_energy(0.5 * (X**2 + Y**2), grid) - grid.area * q2_identity(np.eye(2)) / 24.0) < 1e-10
    v = np.sin(X) * np.cos(2 * Y)
    w = rng.standard_normal(grid.shape + (2,))
    fun = VKEnergy(grid)
    vv, ww = fun.split(fun.pack(v, w))
    _, Hv, _ = fun.parts(vv, ww)
    assert abs(linear_energy(v, grid) - grid.integrate(q2_identity(Hv)) / 24.0) < 1e-14


def test_vk_prestrained_reduces_to_classical(rng):
    grid = Grid.square(10, half_width=0.5, kind="chebyshev")
    y0 = flat(grid).y
    e3 = np.broadcast_to([0.0, 0.0, 1.0], y0.shape)
    v = rng.standard_normal(grid.shape) * 0.1
    w = rng.standard_normal(grid.shape + (2,)) * 0.1
    st = VKState.classical(grid, v, w)
    val = vk_prestrained_energy(st, y0, e3, identity_metric(), np.zeros((2, 2)))
    ref = vk_energy(VKState(grid, v=v, w=w))
    assert abs(val - ref) <= 1e-12 * abs(ref)
    assert np.allclose(solve_p(st.V, y0, e3, grid), st.p)


def test_vk_prestrained_curvature_only():
    grid = Grid.square(10, kind="chebyshev")
    y0 = flat(grid).y
    z3 = np.zeros(y0.shape)
    e3 = np.broadcast_to([0.0, 0.0, 1.0], y0.shape)
    st = VKState(grid, V=z3, S=np.zeros(grid.shape + (2, 2)), p=z3)
    block = np.array([[1.0, 0.2], [0.2, -0.5]])
    val = vk_prestrained_energy(st, y0, e3, identity_metric(), block)
    assert abs(val - grid.area * q2_identity(block) / 1440.0) < 1e-14
    assert abs(vk_prestrained_energy(st, y0, e3, identity_metric(), np.zeros((2, 2)))) < 1e-30
    with pytest.raises(ValueError):
        vk_prestrained_energy(VKState(grid, V=z3, S=st.S), y0, e3, identity_metric(), block)


def test_recovery_h4_identity():
    grid = Grid.square(10, kind="chebyshev")
    y = flat(grid)
    u = build_recovery_h4(y, cosserat(y, identity_metric()), identity_metric())
    assert np.max(np.abs(u.directors[1])) < 1e-14
    assert energy3d(u, identity_metric(), 0.1) < 1e-20


def test_mollified_recovery_rejects_small_eps():
    grid = Grid.square(32)
    with pytest.raises(EnergyError):
        mollified_recovery(flat(grid), identity_metric(), 1e-6, 0.2)
    with pytest.raises(ValueError):
        mollified_recovery(flat(grid), identity_metric(), 0.1, 1.5)


def test_mollified_smooth_data_is_near_identity():
    grid = Grid.square(32)
    y = flat(grid)
    u = mollified_recovery(y, identity_metric(), 0.05, 0.2)
    m = grid.interior(8)
    assert np.max(np.abs(u.y0 - y.y)[m]) < 1e-12
    assert np.allclose(u.directors[0], [0.0, 0.0, 1.0])


def test_gradients():
    grid = Grid.square(8, half_width=0.5, kind="chebyshev")
    rng = np.random.default_rng(3)
    fun = ThinFilmEnergy(conformal_monomial(2), grid, 0.1)
    X, Y = grid.mesh
    u = KLDeformation.identity(grid)
    bump = np.stack([np.sin(X + Y), X * Y, np.cos(X) * Y], -1)
    x = KLDeformation(grid, u.y0 + 0.05 * bump, (u.directors[0] + 0.05 * bump, 0.1 * bump)).pack()
    assert grad_check(fun, x) < 1e-6
    vk = VKEnergy(grid)
    assert grad_check(vk, 0.1 * rng.standard_normal(3 * 64)) < 1e-6
    sph = SurfaceImmersion.from_surface(sphere_surface(1.0), Grid.square(8, half_width=0.3, kind="chebyshev"))
    kf = KirchhoffEnergy(identity_metric(), sph.grid)
    assert grad_check(kf, sph.y.ravel()) < 1e-6


def test_hessian_matches_gradient_differences():
    grid = Grid.square(8, half_width=0.5, kind="chebyshev")
    fun = ThinFilmEnergy(conformal_monomial(2), grid, 0.1)
    x = KLDeformation.identity(grid).pack()
    H = fun.hessian(x)
    d = np.random.default_rng(0).standard_normal(x.size)
    eps = 1e-6
    hd = (fun(x + eps * d)[1] - fun(x - eps * d)[1]) / (2 * eps)
    assert np.linalg.norm(H @ d - hd) < 1e-5 * np.linalg.norm(hd)


def test_default_model_lame():
    assert DEFAULT_MODEL.lame == (2.0, 2.0)


def test_q2_minimization_property(rng):
    from prestrain.energy import q2_operator, q2_apply
    from prestrain.geometry import codazzi_metric, metric_sqrt

    g = codazzi_metric(0.7)
    worst = -np.inf
    for _ in range(100):
        x = np.append(rng.uniform(-0.5, 0.5, 2), 0.0)
        F = rng.standard_normal((3, 3))
        K, _ = q2_operator(g(x))
        Ainv = np.linalg.inv(metric_sqrt(g(x)))
        worst = max(worst, q2_apply(K, F[:2, :2]) - q3(Ainv @ F @ Ainv))
    assert worst <= 1e-10


POSITIVITY_FLOOR = 0.009


@pytest.mark.parametrize("n", [8, 10])
def test_positivity_persists_under_refinement(n):
    from prestrain.minimize import minimize_preconditioned
    from prestrain.scaling import SWEEP_OPTIONS

    fun = ThinFilmEnergy(conformal_monomial(1), Grid.square(n, half_width=1.0, kind="chebyshev"), 0.2)
    res = minimize_preconditioned(fun, KLDeformation.identity(fun.grid).pack(), fun.hessian, SWEEP_OPTIONS)
    assert res.converged
    assert res.energy > POSITIVITY_FLOOR
