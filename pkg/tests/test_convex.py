import math

import numpy as np
import pytest

from prestrain.convex import (CorrugationError, corrugate, corrugation_stage, deficit_norm, short_check,
                              shortness_margin, zigzag)
from prestrain.geometry import SurfaceImmersion, edge_growth_metric_2d, plane_surface
from prestrain.grid import Grid


def half_scaled_flat(n=64):
    g = Grid.square(n)
    return SurfaceImmersion(0.5 * SurfaceImmersion.from_surface(plane_surface(), g).y, g)


def wavy_short_map():
    g = Grid.square(64)
    X, Y = g.mesh
    return SurfaceImmersion(np.stack([0.7 * X + 0.05 * np.sin(6 * Y), 0.7 * Y,
                                      0.1 * np.sin(5 * X) * np.cos(4 * Y)], -1), g)


def test_zigzag_zero():
    z = zigzag(lambda x: 0.0, 10)
    assert set(z.slopes) == {1, -1}
    assert z.sup_distance(lambda x: 0.0) <= 0.2
    assert max(abs(float(v)) for v in z.values) <= 0.2


def test_zigzag_half():
    u0 = lambda x: x / 2
    z = zigzag(u0, 20)
    assert set(z.slopes) == {1, -1}
    assert z.sup_distance(u0) <= 0.1


def test_zigzag_sine_refinement():
    u0 = lambda x: 0.9 * math.sin(x)
    d = [zigzag(u0, n).sup_distance(u0) for n in (16, 32, 64)]
    ratios = np.array(d[:-1]) / np.array(d[1:])
    assert np.all(np.abs(ratios - 2) < 0.2)


def test_zigzag_rejects_non_short():
    with pytest.raises(ValueError, match="short"):
        zigzag(lambda x: x, 10)
    with pytest.raises(ValueError):
        zigzag(lambda x: 0.0, 0)
    assert shortness_margin(lambda x: 0.5 * x) == pytest.approx(0.5)


def test_short_check_cases():
    u = half_scaled_flat(16)
    ok, D = short_check(u, np.eye(2))
    assert ok and np.allclose(D, 0.75 * np.eye(2))
    ident = SurfaceImmersion.from_surface(plane_surface(), u.grid)
    ok, D = short_check(ident, np.eye(2))
    assert not ok and np.max(np.abs(D)) < 1e-12
    g2 = edge_growth_metric_2d([0.0, 0.0, 1.0], 0.1)
    _, D = short_check(ident, g2)
    X, Y = u.grid.mesh
    assert np.all(D[..., 0, 0][Y != 0] > 0)
    assert np.allclose(D[..., 0, 0], 0.02 * Y**2)


def test_corrugation_stage_reduces_deficit():
    u = half_scaled_flat()
    _, D = short_check(u, np.eye(2))
    v = corrugation_stage(u, np.eye(2), [1.0, 0.0], 64)
    ok, D2 = short_check(v, np.eye(2))
    assert ok
    before = math.sqrt(u.grid.integrate(D[..., 0, 0] ** 2))
    after = math.sqrt(u.grid.integrate(D2[..., 0, 0] ** 2))
    assert after <= 0.6 * before
    assert np.max(np.linalg.norm(v.y - u.y, axis=-1)) <= 1.0 / 64


def test_corrugation_small_amplitude_limit():
    g = Grid.square(32)
    base = SurfaceImmersion.from_surface(plane_surface(), g).y
    u = SurfaceImmersion((1 - 1e-6) * base, g)
    v = corrugation_stage(u, np.eye(2), [1.0, 0.0], 256)
    assert np.max(np.abs(v.y - u.y)) < 1e-5


def test_corrugation_rejects_low_frequency_with_suggestion():
    with pytest.raises(CorrugationError) as info:
        corrugation_stage(wavy_short_map(), np.eye(2), [1.0, 0.0], 2)
    assert info.value.suggested == 4
    with pytest.raises(CorrugationError):
        corrugation_stage(SurfaceImmersion.from_surface(plane_surface(), Grid.square(16)), np.eye(2),
                          [1.0, 0.0], 64)


def test_corrugate_monotone_history():
    u = half_scaled_flat()
    out, history, freqs = corrugate(u, np.eye(2), frequency=64)
    assert all(b < a for a, b in zip(history, history[1:]))
    assert short_check(out, np.eye(2))[0]
    assert freqs == [64.0, 256.0, 1024.0]
    assert history[0] == pytest.approx(deficit_norm(0.75 * np.ones(u.grid.shape + (2, 2)) * np.eye(2), u.grid))


def test_corrugate_retries_at_suggested_frequency():
    _, _, freqs = corrugate(wavy_short_map(), np.eye(2), stages=1, frequency=2)
    assert freqs == [8.0]


def test_energy_bridge_to_mollified_recovery():
    from prestrain.energy import energy3d, mollified_recovery
    from prestrain.geometry import identity_metric

    u = corrugation_stage(half_scaled_flat(), np.eye(2), [1.0, 0.0], 8)
    rough = SurfaceImmersion(u.y, u.grid)
    for h in (0.1, 0.05):
        kl = mollified_recovery(rough, identity_metric(), h, 0.2)
        assert np.isfinite(energy3d(kl, identity_metric(), h))
