"""Growth systems for a thin lamina: static residuals and the feedback law.

Fields live on a periodic uniform grid; the Laplacian and its inverse are
spectral.  Only the traces of the growth tensors s and b evolve in time;
their traceless parts are carried along as frozen data.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .energy import DEFAULT_MODEL, VKEnergy, _q2_identity_stress
from .grid import Grid
from .minimize import MinimizeOptions, minimize

logger = logging.getLogger(__name__)

POLICIES = ("frozen", "vk-quasistatic")


class StepError(ValueError):
    def __init__(self, msg, suggested=None):
        super().__init__(msg)
        self.suggested = suggested


def _require_periodic(grid):
    if not grid.periodic:
        raise ValueError("growth fields need a periodic grid")


def wavenumbers(grid: Grid):
    """Squared wavenumber |k|^2 on the FFT lattice of a periodic grid."""
    _require_periodic(grid)
    k = [2 * np.pi * np.fft.fftfreq(n, d=l / n) for n, l in zip(grid.shape, grid.lengths)]
    K1, K2 = np.meshgrid(k[0], k[1], indexing="ij")
    return K1**2 + K2**2


def laplacian(f, grid: Grid):
    return np.real(np.fft.ifft2(-wavenumbers(grid) * np.fft.fft2(f)))


def inverse_laplacian(f, grid: Grid):
    """Zero-mean u with Laplacian u = f - mean(f)."""
    k2 = wavenumbers(grid)
    fh = np.fft.fft2(f)
    fh[0, 0] = 0.0
    k2[0, 0] = 1.0
    return np.real(np.fft.ifft2(-fh / k2))


def tr(M):
    return M[..., 0, 0] + M[..., 1, 1]


def det2(M):
    return M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]


def _field(val, grid, name):
    arr = np.asarray(val, dtype=float)
    if arr.shape == (2, 2):
        arr = np.broadcast_to(arr, tuple(grid.shape) + (2, 2)).copy()
    if arr.shape != tuple(grid.shape) + (2, 2):
        raise ValueError(f"{name} must be 2x2 or a 2x2 field on the grid, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class GrowthState:
    grid: Grid
    sigma: np.ndarray
    kappa: np.ndarray
    s: np.ndarray
    b: np.ndarray
    alpha: float = 1.0
    beta: float = 1.0
    alpha_v: float = 1.0
    beta_v: float = 1.0
    sigma0: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    kappa0: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    t: float = 0.0

    def __post_init__(self):
        _require_periodic(self.grid)
        for name in ("sigma", "kappa", "s", "b", "sigma0", "kappa0"):
            object.__setattr__(self, name, _field(getattr(self, name), self.grid, name))
        for name in ("alpha", "beta", "alpha_v", "beta_v"):
            val = float(getattr(self, name))
            if not (val > 0 and math.isfinite(val)):
                raise ValueError(f"{name} must be positive and finite")
            object.__setattr__(self, name, val)

    @classmethod
    def homeostatic(cls, grid, sigma0=None, kappa0=None, **kw):
        """State sitting at its targets with zero growth tensors."""
        z = np.zeros((2, 2))
        s0 = z if sigma0 is None else np.asarray(sigma0, dtype=float)
        k0 = z if kappa0 is None else np.asarray(kappa0, dtype=float)
        return cls(grid, s0, k0, z, z, sigma0=s0, kappa0=k0, **kw)

    @property
    def tau_S(self):
        return self.alpha_v / self.alpha

    @property
    def tau_B(self):
        return self.beta_v / self.beta

    def max_stable_dt(self):
        """Explicit Euler bound 2 min(tau_S, tau_B)."""
        return 2.0 * min(self.tau_S, self.tau_B)


def residual_g0(state: GrowthState):
    """Residuals of the full static system."""
    g = state.grid
    r1 = (laplacian(tr(state.sigma), g) + 0.5 * state.alpha * det2(state.kappa)
          + state.alpha * laplacian(tr(state.s), g))
    r2 = (state.beta * laplacian(tr(state.kappa), g) - tr(state.sigma @ state.kappa)
          + state.beta * laplacian(tr(state.b), g))
    return r1, r2


@dataclass
class LimitResiduals:
    r1: np.ndarray
    r2: np.ndarray
    diagnostic: np.ndarray

    @property
    def sup_diagnostic(self):
        return float(np.max(np.abs(self.diagnostic)))


def residual_stretch_limit(state: GrowthState, a):
    """Stretching-dominated rescaling; diagnostic tr(sigma kappa) (stress-scaled mean curvature)."""
    if not a > 0:
        raise ValueError("a must be positive")
    g = state.grid
    sk = tr(state.sigma @ state.kappa)
    r1 = laplacian(tr(state.sigma), g) + 0.5 * det2(state.kappa) + laplacian(tr(state.s), g)
    r2 = a**2 * laplacian(tr(state.kappa), g) - sk + a**2 * laplacian(tr(state.b), g)
    return LimitResiduals(r1, r2, sk)


def residual_bend_limit(state: GrowthState, a):
    """Bending-dominated rescaling; diagnostic det kappa + 2 Laplacian(tr s)."""
    if not a > 0:
        raise ValueError("a must be positive")
    g = state.grid
    lap_s = laplacian(tr(state.s), g)
    r1 = a**2 * laplacian(tr(state.sigma), g) + 0.5 * det2(state.kappa) + lap_s
    r2 = laplacian(tr(state.kappa), g) - tr(state.sigma @ state.kappa) + laplacian(tr(state.b), g)
    return LimitResiduals(r1, r2, det2(state.kappa) + 2.0 * lap_s)


def _zero_mean(f):
    return f - np.mean(f)


def trace_rates(state: GrowthState):
    """(d/dt tr s, d/dt tr b) from the feedback law.

    Zero-mean parts invert the Laplacian; the Laplacian-of-field terms are
    cancelled symbolically.  The means are driven by the spatial averages of
    the right sides divided by the viscosities.
    """
    g = state.grid
    ds = state.sigma0 - state.sigma
    dk = state.kappa0 - state.kappa
    d = det2(dk)
    c = tr(ds @ dk)
    rate_s = (-(state.alpha / state.alpha_v) * _zero_mean(tr(state.s))
              - _zero_mean(tr(ds)) / state.alpha_v
              - (0.5 * state.alpha / state.alpha_v) * (inverse_laplacian(d, g) + np.mean(d)))
    rate_b = ((state.beta / state.beta_v) * (_zero_mean(tr(state.b)) + _zero_mean(tr(dk)))
              - (inverse_laplacian(c, g) + np.mean(c)) / state.beta_v)
    return rate_s, rate_b


def step_feedback(state: GrowthState, dt):
    """One explicit Euler step of the traces; traceless parts and (sigma, kappa) held."""
    dt = float(dt)
    if not dt > 0:
        raise ValueError("dt must be positive")
    bound = state.max_stable_dt()
    if dt > bound:
        raise StepError(f"dt={dt:g} exceeds the stability bound {bound:g}", suggested=0.5 * bound)
    rs, rb = trace_rates(state)
    eye = np.eye(2)
    s = state.s + 0.5 * dt * rs[..., None, None] * eye
    b = state.b + 0.5 * dt * rb[..., None, None] * eye
    return replace(state, s=s, b=b, t=state.t + dt)


# ---------------------------------------------------------------------------
# coupled runs

@dataclass
class TrajectoryRow:
    t: float
    energy: float
    trace_s: float
    trace_b: float
    sigma_norm: float
    kappa_norm: float


@dataclass
class Trajectory:
    rows: list = field(default_factory=list)
    truncated: bool = False
    reason: str = ""
    final: Optional[GrowthState] = None

    COLUMNS = ("t", "energy", "trace_s_l2", "trace_b_l2", "sigma_l2", "kappa_l2")

    def as_array(self):
        return np.array([[r.t, r.energy, r.trace_s, r.trace_b, r.sigma_norm, r.kappa_norm]
                         for r in self.rows])


def _l2(f, grid):
    return math.sqrt(grid.integrate(f * f if f.ndim == 2 else np.sum(f * f, axis=(-2, -1))))


def _row(state, energy):
    g = state.grid
    return TrajectoryRow(state.t, energy, _l2(tr(state.s), g), _l2(tr(state.b), g),
                         _l2(state.sigma, g), _l2(state.kappa, g))


VK_OPTIONS = MinimizeOptions(gtol=1e-300, rtol=1e-7, ftol=1e-14, max_iter=3000)


def quasistatic_refresh(state: GrowthState, model=DEFAULT_MODEL, x0=None, options=VK_OPTIONS):
    """Minimize the von Karman energy with targets (s, b); read sigma and kappa back.

    Returns (new state, energy, packed minimizer, converged).
    """
    fun = VKEnergy(state.grid, model, target_strain=state.s, target_curvature=state.b)
    n = state.grid.shape[0] * state.grid.shape[1]
    x = np.zeros(3 * n) if x0 is None else x0
    res = minimize(fun, x, options)
    v, w = fun.split(res.x)
    E, Hv, _ = fun.parts(v, w)
    sigma = 0.5 * _q2_identity_stress(E, model)
    return replace(state, sigma=sigma, kappa=Hv + state.b), res.energy, res.x, res.converged


def coupled_run(state: GrowthState, steps, dt, policy="frozen", model=None):
    """Alternate growth steps with a stress/curvature refresh policy."""
    if policy not in POLICIES:
        raise ValueError(f"unknown refresh policy {policy!r}; expected one of {POLICIES}")
    if policy == "vk-quasistatic" and model is None:
        raise ValueError("vk-quasistatic refresh needs an elastic model")
    traj = Trajectory()
    x = None
    energy = 0.0
    if policy == "vk-quasistatic":
        state, energy, x, ok = quasistatic_refresh(state, model)
        if not ok:
            traj.truncated, traj.reason = True, "initial elastic minimization failed"
            traj.final = state
            return traj
    traj.rows.append(_row(state, energy))
    for k in range(int(steps)):
        state = step_feedback(state, dt)
        if policy == "vk-quasistatic":
            state, energy, x, ok = quasistatic_refresh(state, model, x)
            if not ok:
                traj.truncated, traj.reason = True, f"elastic minimization failed at step {k + 1}"
                traj.rows.append(_row(state, energy))
                break
        traj.rows.append(_row(state, energy))
    traj.final = state
    return traj
