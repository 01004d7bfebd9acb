"""Command line entry point ``prestrain``.

Every subcommand reads an optional ``--config`` file, applies its flags on
top, validates the result and embeds the config hash and seed in the
files it writes.  Exit codes: 0 success, 2 validation error, 3 numerical
failure, 4 IO error.  ``PRESTRAIN_WORKERS`` sets the process count for
independent (cold-started) sweep points; ``--deterministic`` forces one.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import geometry
from .config import ZIGZAG_TARGETS, ConfigError, RunConfig, from_mapping, header_lines, parse_config
from .convex import CorrugationError, corrugate, zigzag
from .energy import EnergyError, KLDeformation, ThinFilmEnergy
from .geometry import MetricError, SurfaceImmersion
from .grid import Grid
from .growth import GrowthState, StepError, coupled_run
from .io import export_csv, export_mesh, read_sym2_field, write_field_csv, write_table_csv
from .minimize import MinimizeOptions, minimize_preconditioned
from .monge_ampere import WeakPrestrain, ma_residual, solve_constrained, vweak_det, hessian_det
from .scaling import (ScalingReport, SweepPoint, finish_report, fit_report, gamma_limit_consistency,
                      read_report_csv, shell_regime, sweep)

logger = logging.getLogger("prestrain")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
WORKERS_ENV = "PRESTRAIN_WORKERS"


class NumericalFailure(RuntimeError):
    pass


def worker_count(deterministic=False):
    if deterministic:
        return 1
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}")
    return n


def _options(cfg: RunConfig):
    return MinimizeOptions(gtol=cfg.gtol, rtol=cfg.rtol, ftol=cfg.ftol, max_iter=cfg.max_iter, seed=cfg.seed)


def _out(cfg, default):
    return cfg.out or default


# ---------------------------------------------------------------------------
# subcommands

def run_curvature(cfg: RunConfig, args):
    g = cfg.build_metric()
    grid = cfg.grid()
    rep = geometry.kirchhoff_compatibility(g, grid, cfg.tol_compat)
    for key, val in rep.sup.items():
        print(f"sup|R_{key}| = {val:.6e}")
    print(f"tolerance = {rep.tol:.3e}  compatible = {rep.compatible}")
    try:
        q = geometry.quantization_order(g, 4, grid, cfg.tol_compat)
        if q.order is None:
            print("quantization order: none up to n=4")
        else:
            print(f"quantization order n = {q.order}, predicted exponent {q.exponent}")
    except ValueError as exc:
        print(f"quantization order unavailable: {exc}")
    if cfg.out:
        fields = {f"R{k.replace(',', '_')}": v for k, v in rep.r12.items()}
        write_field_csv(grid, fields, cfg.out, header_lines(cfg))
    return EXIT_OK


def run_minimize(cfg: RunConfig, args):
    g = cfg.build_metric()
    grid = cfg.grid()
    fun = ThinFilmEnergy(g, grid, cfg.h, cfg.model(), cfg.ansatz_order, cfg.quadrature)
    x0 = KLDeformation.identity(grid, cfg.ansatz_order).pack()
    res = minimize_preconditioned(fun, x0, fun.hessian, _options(cfg))
    print(f"E^h = {res.energy:.17g}  iterations = {res.iterations}  status = {res.status}")
    res.write_trace(_out(cfg, "trace.csv"), header_lines(cfg))
    if not res.converged:
        raise NumericalFailure(f"minimization did not converge ({res.status})")
    return EXIT_OK


def _sweep_point(payload):
    cfg, h = payload
    g = cfg.build_metric()
    grid = cfg.grid()
    fun = ThinFilmEnergy(g, grid, h, cfg.model(), cfg.ansatz_order, cfg.quadrature)
    x0 = KLDeformation.identity(grid, cfg.ansatz_order).pack()
    res = minimize_preconditioned(fun, x0, fun.hessian, _options(cfg))
    return SweepPoint(h, res.energy, res.iterations, res.converged)


def run_sweep(cfg: RunConfig, args):
    g = cfg.build_metric()
    grid = cfg.grid()
    workers = worker_count(args.deterministic)
    if not cfg.warm and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            points = list(pool.map(_sweep_point, [(cfg, h) for h in cfg.hs]))
        report = finish_report(ScalingReport(points), g, grid)
    else:
        report = sweep(g, cfg.hs, cfg.ansatz_order, grid, cfg.model(), _options(cfg), warm=cfg.warm,
                       quadrature=cfg.quadrature)
    extra = [f"predicted = {report.predicted}", f"provenance = {report.provenance}"]
    export_csv(report, _out(cfg, "report.csv"), header_lines(cfg) + extra)
    for p in report.points:
        print(f"h = {p.h:g}  E = {p.energy:.6e}  converged = {p.converged}")
    if report.beta is not None:
        print(f"beta = {report.beta:.4f}  residual = {report.residual:.3e}  excluded = {report.excluded}")
    if report.predicted is not None:
        print(f"predicted beta = {report.predicted:g} ({report.provenance})")
    if report.note:
        print(report.note)
    if report.beta is None and report.note != "zero energy":
        raise NumericalFailure("too few converged sweep points for a fit")
    return EXIT_OK


def run_gamma_check(cfg: RunConfig, args):
    g = cfg.build_metric()
    grid = cfg.grid()
    y = SurfaceImmersion.from_surface(cfg.build_surface(), grid)
    rows = gamma_limit_consistency(g, y, cfg.hs, cfg.model(), cfg.quadrature)
    for r in rows:
        print(f"h = {r.h:g}  E/h^2 = {r.scaled_energy:.8e}  I2 = {r.limit:.8e}  gap = {r.gap:.3e}")
    write_table_csv(_out(cfg, "gamma.csv"), ("h", "scaled_energy", "limit", "gap"),
                    [(r.h, r.scaled_energy, r.limit, r.gap) for r in rows], header_lines(cfg))
    return EXIT_OK


def run_zigzag(cfg: RunConfig, args):
    u0 = ZIGZAG_TARGETS[cfg.target]
    z = zigzag(u0, cfg.n)
    dist = z.sup_distance(u0)
    print(f"pieces = {len(z.knots) - 1}  sup distance = {dist:.6e}  bound 2/n = {2.0 / cfg.n:.6e}")
    rows = [(float(k), float(v), float(u0(float(k)))) for k, v in zip(z.knots, z.values)]
    write_table_csv(_out(cfg, "zigzag.csv"), ("x", "u_n", "u0"), rows, header_lines(cfg))
    return EXIT_OK


def run_corrugate(cfg: RunConfig, args):
    grid = cfg.grid()
    g2 = cfg.build_metric().restricted()
    X, Y = grid.mesh
    u = SurfaceImmersion(np.stack([cfg.scale * X, cfg.scale * Y, 0 * X], -1), grid)
    v, hist, freqs = corrugate(u, g2, cfg.stages, cfg.lam, cfg.lam_growth)
    for k, (d, lam) in enumerate(zip(hist[1:], freqs), start=1):
        print(f"stage {k}: frequency {lam:g}  deficit {d:.6e}")
    extra = [f"deficit_history = {', '.join(f'{d:.17g}' for d in hist)}",
             f"frequencies = {', '.join(f'{f:.17g}' for f in freqs)}"]
    export_mesh(v, _out(cfg, "mesh.obj"), header_lines(cfg) + extra)
    return EXIT_OK


def _grid_from_axes(x1, x2):
    for ax in (x1, x2):
        d = np.diff(ax)
        if not np.allclose(d, d[0], rtol=1e-9, atol=0):
            raise ConfigError("field CSV must sit on a uniform grid")
    return Grid((x1[0], x1[-1], x2[0], x2[-1]), (len(x1), len(x2)))


def ma_prestrain(cfg: RunConfig):
    if cfg.ma_datum == "file":
        x1, x2, S2 = read_sym2_field(cfg.S_file)
        grid = _grid_from_axes(x1, x2)
        B2 = None
        if cfg.B_file:
            bx1, bx2, B2 = read_sym2_field(cfg.B_file)
            if not (np.array_equal(bx1, x1) and np.array_equal(bx2, x2)):
                raise ConfigError("S and B fields must share the grid", "B_file")
        return WeakPrestrain.from_2x2(grid, S2, B2, cfg.gamma)
    grid = cfg.grid()
    pts = grid.points
    xx = pts[..., :, None] * pts[..., None, :]
    sign = {"elliptic": 0.5, "hyperbolic": -0.5, "zero": 0.0}[cfg.ma_datum]
    return WeakPrestrain.from_2x2(grid, sign * xx, None, cfg.gamma)


def run_ma_solve(cfg: RunConfig, args):
    p = ma_prestrain(cfg)
    res = solve_constrained(p, cfg.schedule, model=cfg.model())
    for mu, r, e in res.path:
        print(f"mu = {mu:g}  residual = {r:.3e}  energy = {e:.8e}")
    print(f"tol_MA = {res.tol:.3e}  infeasible = {res.infeasible}")
    r, _ = ma_residual(res.v, p)
    write_field_csv(p.grid, {"v": res.v, "residual": r, "Det": vweak_det(res.v, p.grid),
                             "det": hessian_det(res.v, p.grid)},
                    _out(cfg, "v.csv"), header_lines(cfg) + [f"energy = {res.energy:.17g}"])
    if res.infeasible:
        raise NumericalFailure("residual above tol_MA after the final penalty")
    return EXIT_OK


def growth_state(cfg: RunConfig):
    L = 2.0 * cfg.grid_half_width
    grid = Grid.square(cfg.grid_n, half_width=cfg.grid_half_width, boundary="periodic")
    sigma0 = np.array(cfg.sigma0).reshape(2, 2)
    kappa0 = np.array(cfg.kappa0).reshape(2, 2)
    st = GrowthState.homeostatic(grid, sigma0, kappa0, alpha=cfg.alpha, beta=cfg.beta,
                                 alpha_v=cfg.alpha_v, beta_v=cfg.beta_v)
    X, _ = grid.mesh
    bump = 0.5 * cfg.perturbation * np.cos(2 * np.pi * X / L)
    return GrowthState(grid, st.sigma, st.kappa, st.s + bump[..., None, None] * np.eye(2), st.b,
                       st.alpha, st.beta, st.alpha_v, st.beta_v, st.sigma0, st.kappa0)


def run_grow(cfg: RunConfig, args):
    st = growth_state(cfg)
    model = cfg.model() if cfg.policy == "vk-quasistatic" else None
    traj = coupled_run(st, cfg.steps, cfg.dt, cfg.policy, model)
    arr = traj.as_array()
    write_table_csv(_out(cfg, "traj.csv"), traj.COLUMNS, [tuple(float(v) for v in row) for row in arr],
                    header_lines(cfg))
    print(f"steps = {len(arr) - 1}  final tr s L2 = {arr[-1, 2]:.6e}  final tr b L2 = {arr[-1, 3]:.6e}")
    if traj.truncated:
        raise NumericalFailure(traj.reason)
    return EXIT_OK


def run_report(cfg: RunConfig, args):
    rows = read_report_csv(cfg.input)
    pairs = [(h, e) for h, e, ok in rows if ok]
    beta, res, excluded = fit_report(pairs)
    print(f"beta = {beta:.6f}  residual = {res:.3e}  excluded = {excluded}")
    lines = [f"beta = {beta:.17g}", f"residual = {res:.17g}"]
    if beta > 2:
        reg = shell_regime(beta)
        print(f"shell regime k = {reg.k}  [{reg.lower}, {reg.upper})  endpoint = {reg.endpoint}")
        lines.append(f"shell_regime = {reg.k}")
    if cfg.out:
        with open(cfg.out, "w") as fh:
            for ln in header_lines(cfg):
                fh.write(f"# {ln}\n")
            fh.write("\n".join(lines) + "\n")
    return EXIT_OK


HANDLERS = {
    "curvature": run_curvature, "minimize": run_minimize, "sweep": run_sweep,
    "gamma-check": run_gamma_check, "zigzag": run_zigzag, "corrugate": run_corrugate,
    "ma-solve": run_ma_solve, "grow": run_grow, "report": run_report,
}


# ---------------------------------------------------------------------------
# argument parsing

_COMMON = ("metric", "metric_file", "density", "q", "grid_n", "grid_half_width", "grid_kind")
_FLAGS = {
    "curvature": _COMMON + ("phi", "k", "d3", "d33", "f", "eps", "kappa", "c", "surface", "radius",
                            "tol_compat"),
    "minimize": _COMMON + ("phi", "k", "d3", "d33", "f", "eps", "kappa", "c", "h", "ansatz_order",
                           "quadrature", "gtol", "rtol", "ftol", "max_iter"),
    "sweep": _COMMON + ("phi", "k", "d3", "d33", "f", "eps", "kappa", "c", "hs", "ansatz_order",
                        "quadrature", "warm", "gtol", "rtol", "ftol", "max_iter"),
    "gamma-check": _COMMON + ("d3", "d33", "surface", "radius", "hs", "quadrature"),
    "zigzag": ("target", "n"),
    "corrugate": _COMMON + ("kappa", "f", "eps", "stages", "lam", "lam_growth", "scale"),
    "ma-solve": ("ma_datum", "S_file", "B_file", "gamma", "schedule", "grid_n", "grid_half_width",
                 "grid_kind", "density", "q"),
    "grow": ("steps", "dt", "alpha", "beta", "alpha_v", "beta_v", "sigma0", "kappa0", "perturbation",
             "policy", "grid_n", "grid_half_width", "density", "q"),
    "report": ("input",),
}
_ALIASES = {"lam": ["--lambda", "--lam"], "S_file": ["--S"], "B_file": ["--B"], "input": ["--input", "--in"]}


def build_parser():
    parser = argparse.ArgumentParser(prog="prestrain", description="Prestrained thin-sheet experiments.")
    parser.add_argument("--deterministic", action="store_true", help="force serial evaluation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in HANDLERS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--out", help="output path")
        p.add_argument("--seed", help="random seed recorded in outputs")
        for key in _FLAGS[name]:
            flags = _ALIASES.get(key, ["--" + key.replace("_", "-")])
            p.add_argument(*flags, dest=key, default=None)
    return parser


def load_config(args):
    base = RunConfig(command=args.command)
    if args.config:
        with open(args.config) as fh:
            base = parse_config(fh.read())
        if base.command != args.command:
            base = from_mapping({"command": args.command}, base)
    overrides = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config", "deterministic", "verbose") and v is not None}
    return from_mapping(overrides, base)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return HANDLERS[args.command](cfg, args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalFailure, EnergyError, CorrugationError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, MetricError, StepError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
