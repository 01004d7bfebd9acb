"""Limited-memory quasi-Newton minimizer with Armijo backtracking.

Functionals are callables ``fun(x) -> (value, gradient)`` on flat float
vectors.  A value of ``inf`` marks an inadmissible point (for instance a
quadrature node with ``det F <= det_guard``); the line search treats it as a
rejected trial step.
"""

from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MinimizeOptions:
    gtol: float = 1e-10
    rtol: float = 0.0
    ftol: float = 0.0
    max_iter: int = 2000
    memory: int = 12
    armijo: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 60
    seed: int = 0
    saddle_perturbation: float = 1e-6

    def __post_init__(self):
        if self.gtol <= 0:
            raise ValueError("gtol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")


@dataclass
class MinimizeResult:
    x: np.ndarray
    energy: float
    grad_norm: float
    iterations: int
    converged: bool
    status: str
    trace: list = field(default_factory=list)

    def write_trace(self, path, header_lines=()):
        write_trace_csv(self.trace, path, header_lines)


def write_trace_csv(trace, path, header_lines=()):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "energy", "grad_norm", "step_size"])
        for it, e, g, s in trace:
            writer.writerow([it, f"{e:.17g}", f"{g:.17g}", f"{s:.17g}"])


def minimize(fun, x0, options=None, callback=None, preconditioner=None):
    """Minimize ``fun`` from ``x0``.

    ``preconditioner``, if given, applies an SPD approximation of the
    inverse Hessian to a vector and replaces the scalar initial matrix of
    the two-loop recursion.

    Stops when the gradient norm drops below ``max(gtol, rtol * |g0|)``
    (status ``"gtol"``), when the relative energy decrease of an accepted
    step falls under ``ftol`` (``"ftol"``), after ``max_iter`` iterations
    (``"max_iter"``), or when no step along the current or the steepest
    descent direction decreases the energy (``"line_search"``; the best
    point so far is returned).
    """
    opts = options or MinimizeOptions()
    x = np.array(x0, dtype=float).ravel()
    f, g = fun(x)
    if not np.isfinite(f):
        raise ValueError("energy is not finite at the initial point")
    g = np.asarray(g, dtype=float).ravel()
    gnorm = float(np.linalg.norm(g))

    if gnorm == 0.0 and opts.saddle_perturbation > 0:
        # a critical start (flat plate, zero state) is perturbed reproducibly
        rng = np.random.default_rng(opts.seed)
        trial = x + opts.saddle_perturbation * rng.standard_normal(x.size)
        ft, gt = fun(trial)
        if np.isfinite(ft):
            x, f, g = trial, ft, np.asarray(gt, dtype=float).ravel()
            gnorm = float(np.linalg.norm(g))

    target = max(opts.gtol, opts.rtol * gnorm)
    trace = [(0, float(f), gnorm, 0.0)]
    pairs = deque(maxlen=opts.memory)
    status = "max_iter"
    it = 0
    while it < opts.max_iter:
        if gnorm <= target:
            status = "gtol"
            break
        it += 1
        d = -_two_loop(g, pairs, preconditioner)
        slope = float(d @ g)
        if slope >= 0:
            pairs.clear()
            d, slope = -g, -gnorm**2
        step0 = 1.0 if (pairs or preconditioner is not None) else min(1.0, 1.0 / gnorm)
        accepted = _backtrack(fun, x, f, g, d, slope, step0, opts)
        if accepted is None and pairs:
            pairs.clear()
            d, slope = -g, -gnorm**2
            accepted = _backtrack(fun, x, f, g, d, slope, min(1.0, 1.0 / gnorm), opts)
        if accepted is None:
            status = "line_search"
            it -= 1
            break
        step, x_new, f_new, g_new = accepted
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            pairs.append((s, y, 1.0 / sy))
        decrease = f - f_new
        x, g, f_old, f = x_new, g_new, f, f_new
        gnorm = float(np.linalg.norm(g))
        trace.append((it, float(f), gnorm, float(step)))
        if callback is not None:
            callback(it, x, f, gnorm)
        if opts.ftol > 0 and decrease <= opts.ftol * max(abs(f_old), np.finfo(float).tiny):
            status = "ftol"
            break
    else:
        if gnorm <= target:
            status = "gtol"

    converged = status in ("gtol", "ftol")
    if not converged:
        logger.info("minimize stopped without convergence: %s (|g|=%.3e)", status, gnorm)
    return MinimizeResult(x, float(f), gnorm, it, converged, status, trace)


def _two_loop(g, pairs, precond=None):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if precond is not None:
        q = np.asarray(precond(q), dtype=float)
    elif pairs:
        s, y, _ = pairs[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q


def _backtrack(fun, x, f, g0, d, slope, step, opts):
    for _ in range(opts.max_backtracks):
        x_new = x + step * d
        f_new, g_new = fun(x_new)
        if not np.isfinite(f_new):
            step *= opts.shrink
            continue
        g_new = np.asarray(g_new, dtype=float).ravel()
        if f_new <= f + opts.armijo * step * slope and f_new < f:
            return step, x_new, float(f_new), g_new
        # energy differences below roundoff: fall back on the gradient norm
        if abs(f_new - f) <= 1e-13 * max(abs(f), 1e-300) and np.linalg.norm(g_new) < np.linalg.norm(g0):
            return step, x_new, float(f_new), g_new
        step *= opts.shrink
    return None


def minimize_preconditioned(fun, x0, hessian, options=None, rounds=10, round_iter=100):
    """Restarted L-BFGS whose initial matrix is the modified inverse Hessian at each restart.

    Convergence is judged against the gradient norm at ``x0`` (``options.rtol``)
    and ``options.ftol``; each round runs at most ``round_iter`` iterations.
    """
    opts = options or MinimizeOptions()
    x = np.array(x0, dtype=float).ravel()
    _, g0 = fun(x)
    target = max(opts.gtol, opts.rtol * float(np.linalg.norm(g0)))
    trace, its, res = [], 0, None
    for _ in range(rounds):
        inner = MinimizeOptions(gtol=target, ftol=opts.ftol, max_iter=min(round_iter, opts.max_iter - its),
                                memory=opts.memory, armijo=opts.armijo, shrink=opts.shrink,
                                max_backtracks=opts.max_backtracks, seed=opts.seed,
                                saddle_perturbation=opts.saddle_perturbation if its == 0 else 0.0)
        res = minimize(fun, x, inner, preconditioner=eigen_preconditioner(hessian(x)))
        trace.extend((it + its, e, gn, st) for it, e, gn, st in (res.trace if not trace else res.trace[1:]))
        x, its = res.x, its + res.iterations
        if res.converged or its >= opts.max_iter or res.iterations == 0:
            break
    return MinimizeResult(x, res.energy, res.grad_norm, its, res.converged, res.status, trace)


def eigen_preconditioner(H, floor=1e-10):
    """Inverse of the absolute-value-modified Hessian, eigenvalues floored at floor * max."""
    H = 0.5 * (np.asarray(H, dtype=float) + np.asarray(H, dtype=float).T)
    lam, V = np.linalg.eigh(H)
    lam = np.abs(lam)
    lam = np.maximum(lam, floor * max(float(lam.max()), np.finfo(float).tiny))
    inv = 1.0 / lam

    def apply(v):
        return V @ (inv * (V.T @ v))

    return apply


def grad_check(fun, x, probes=5, eps=None, seed=0):
    """Largest relative mismatch between ``grad . d`` and a finite difference.

    Random unit directions are probed with a fourth-order central
    difference.
    """
    x = np.array(x, dtype=float).ravel()
    _, g = fun(x)
    g = np.asarray(g, dtype=float).ravel()
    rng = np.random.default_rng(seed)
    if eps is None:
        eps = 1e-4 * max(1.0, float(np.max(np.abs(x))))
    worst = 0.0
    for _ in range(probes):
        d = rng.standard_normal(x.size)
        d /= np.linalg.norm(d)
        fp1, fm1 = fun(x + eps * d)[0], fun(x - eps * d)[0]
        fp2, fm2 = fun(x + 2 * eps * d)[0], fun(x - 2 * eps * d)[0]
        numeric = (8.0 * (fp1 - fm1) - (fp2 - fm2)) / (12.0 * eps)
        analytic = float(g @ d)
        scale = max(abs(analytic), abs(numeric), 1e-300)
        worst = max(worst, abs(analytic - numeric) / scale)
    return worst
