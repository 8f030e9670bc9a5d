"""Command-line front end.

Subcommands: mesh, solve, filter, estimate, dual-check, convergence,
rough-data, drop-fine-scale.  Experiments read a flat ``key = value``
config file with sections (INI syntax); every flag can override the
file.  Exit codes: 0 success, 2 configuration error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from pathlib import Path

import numpy as np

from . import fem, harness, mesh as meshmod
from .fem import SolverFailure
from .filtering import (FilterConfig, a_posteriori_estimate,
                        effectivity, error_representation_check,
                        helmholtz_filter, measure_filtered_error)
from .harness import (ConfigError, ExperimentConfig, compute_rates,
                      export_rate_table_csv, export_reports_csv,
                      export_trajectory, export_vtk)
from .solver import ProblemSetup, run_forward, stability_report

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3


def load_config(path) -> ExperimentConfig:
    """Read an INI-style experiment description.

    Recognized sections/keys (all optional):
      [mesh]       domain, levels, n_boundary
      [problem]    mu, gamma, h_frak, T, kappa, fine_amp
      [time]       tau_rule, tau_fixed, tau_divisor
      [data]       u0, u0_params (JSON), f
      [experiment] name, methods, ref_refines, seed, tau_f_reading, out_dir
    """
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    kw = {}

    def get(section, key, cast=str):
        if cp.has_option(section, key):
            return cast(cp.get(section, key))
        return None

    mapping = [
        ("mesh", "domain", "domain", str),
        ("mesh", "n_boundary", "n_boundary", int),
        ("problem", "mu", "mu", float),
        ("problem", "gamma", "gamma", float),
        ("problem", "h_frak", "h_frak", float),
        ("problem", "T", "T", float),
        ("problem", "kappa", "kappa", float),
        ("problem", "fine_amp", "fine_amp", float),
        ("time", "tau_rule", "tau_rule", str),
        ("time", "tau_fixed", "tau_fixed", float),
        ("time", "tau_divisor", "tau_divisor", float),
        ("data", "u0", "u0_kind", str),
        ("data", "f", "f_kind", str),
        ("experiment", "name", "name", str),
        ("experiment", "ref_refines", "ref_refines", int),
        ("experiment", "seed", "seed", int),
        ("experiment", "tau_f_reading", "tau_f_reading", str),
        ("experiment", "out_dir", "out_dir", str),
    ]
    for section, key, attr, cast in mapping:
        val = get(section, key, cast)
        if val is not None:
            kw[attr] = val
    levels = get("mesh", "levels")
    if levels is not None:
        kw["levels"] = [int(s) for s in levels.replace(",", " ").split()]
    methods = get("experiment", "methods")
    if methods is not None:
        kw["methods"] = methods.replace(",", " ").split()
    params = get("data", "u0_params")
    if params is not None:
        kw["u0_params"] = json.loads(params)
    try:
        return ExperimentConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out_dir", None) is not None:
        cfg.out_dir = args.out_dir
    if getattr(args, "tau_f_reading", None) is not None:
        cfg.tau_f_reading = args.tau_f_reading
    return cfg


def _single_level_setup(cfg: ExperimentConfig, level=None):
    level = cfg.levels[0] if level is None else level
    mesh = harness.build_mesh(cfg, level)
    tau = harness.choose_tau(cfg, mesh.h_max)
    field = harness.make_field(cfg)
    setup = ProblemSetup(mesh=mesh, mu=cfg.mu, field=field, T=cfg.T,
                         u0=harness.make_u0(cfg), gamma=cfg.gamma, method="cip")
    return setup, tau


def cmd_mesh(args) -> int:
    if args.generator == "square":
        mesh = meshmod.generate_unit_square_mesh(args.n)
    else:
        mesh = meshmod.generate_polygonal_disc_mesh(args.n_boundary, args.n)
    stats = meshmod.mesh_statistics(mesh)
    for k, v in stats.items():
        print(f"{k} = {v}")
    if args.out:
        meshmod.write_mesh(mesh, args.out)
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_solve(args) -> int:
    cfg = _config_from_args(args)
    setup, tau = _single_level_setup(cfg, args.level)
    traj = run_forward(setup, tau, integrator=args.integrator,
                       stride=args.stride)
    rep = stability_report(traj, setup)
    for k, v in rep.items():
        print(f"{k} = {v:.6g}")
    out = Path(cfg.out_dir)
    paths = export_trajectory(traj, out, basename=cfg.name)
    print(f"wrote {len(paths)} files under {out}")
    return EXIT_OK


def cmd_filter(args) -> int:
    cfg = _config_from_args(args)
    setup, tau = _single_level_setup(cfg, args.level)
    traj = run_forward(setup, tau, stride=max(int(round(cfg.T / tau)), 1))
    fcfg = FilterConfig(h_frak=cfg.h_frak)
    filtered = helmholtz_filter(traj.final(), fcfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = out / f"{cfg.name}_filtered.vtk"
    export_vtk(setup.mesh, {"u": traj.snapshots[-1],
                            "u_filtered": filtered.coefficients}, p)
    print(f"wrote {p}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = _config_from_args(args)
    setup, tau = _single_level_setup(cfg, args.level)
    traj = run_forward(setup, tau)
    fcfg = FilterConfig(h_frak=cfg.h_frak)
    report = a_posteriori_estimate(traj, setup, fcfg,
                                   tau_F_choice=cfg.tau_f_reading)
    if args.measure:
        ref = harness.overkill_reference(setup, tau, cfg.ref_refines)
        meas = measure_filtered_error(traj.final(), ref.final(), fcfg)
        effectivity(report, meas["norm_h"])
    print(report.text_block())
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    export_reports_csv([report], out / f"{cfg.name}_estimate.csv")
    return EXIT_OK


def cmd_dual_check(args) -> int:
    cfg = _config_from_args(args)
    setup, tau = _single_level_setup(cfg, args.level)
    res = error_representation_check(setup, tau, mode=args.mode,
                                     cfg=FilterConfig(h_frak=cfg.h_frak),
                                     dual_refines=args.dual_refines)
    print(f"lhs = {res['lhs']:.12g}")
    print(f"rhs = {res['rhs']:.12g}")
    print(f"rel_gap = {res['rel_gap']:.3e}")
    return EXIT_OK


def _rough_defaults(cfg: ExperimentConfig) -> None:
    """High-Peclet rough-data setting: k=10 checkerboard on the square."""
    cfg.domain = "square"
    cfg.levels = [16, 32, 64]
    cfg.mu = 1e-6
    cfg.h_frak = 0.01
    cfg.T = 0.5
    cfg.tau_rule = "tau_equals_h"
    cfg.u0_kind = "checkerboard"
    cfg.u0_params = {"k": 10}


def cmd_convergence(args) -> int:
    cfg = _config_from_args(args)
    cfg.domain = "disc"
    if not args.config:
        cfg.levels = [2, 3, 4, 5]
        cfg.mu = 1e-6
        cfg.T = 2.0 * np.pi
        cfg.tau_rule = "tau_equals_h"
        cfg.u0_kind = "gaussian"
        cfg.u0_params = {"sigma": 0.2, "x0": [0.3, 0.0]}
        # small enough that the explicitly stabilized steps stay below
        # the forward-Euler threshold tau * rho(M^-1 S) < 2 on level 5
        cfg.gamma = 0.005
        cfg.methods = ["galerkin", "cip_explicit", "cip_implicit"]
        cfg.name = "rotating_gaussian"
    tables = harness.run_rotating_gaussian(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, table in tables.items():
        rates = compute_rates(table)
        print(f"{name}: slope = {rates['slope']:.3f}, "
              f"pairwise = {[f'{r:.2f}' for r in rates['pairwise']]}")
        export_rate_table_csv(table, out / f"{cfg.name}_{name}.csv")
    return EXIT_OK


def cmd_rough_data(args) -> int:
    cfg = _config_from_args(args)
    if not args.config:
        _rough_defaults(cfg)
        cfg.name = "rough_data"
    res = harness.run_rough_data(cfg, include_galerkin=args.with_galerkin)
    for flag in res["flags"]:
        print(f"warning: {flag}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for key in ("measured", "estimate") + (("galerkin",) if args.with_galerkin else ()):
        table = res[key]
        rates = compute_rates(table)
        print(f"{key}: slope = {rates['slope']:.3f}")
        export_rate_table_csv(table, out / f"{cfg.name}_{key}.csv")
    export_reports_csv(res["reports"], out / f"{cfg.name}_reports.csv")
    effs = [r.effectivity for r in res["reports"]]
    print(f"effectivities = {[f'{e:.2f}' for e in effs]}")
    return EXIT_OK


def cmd_drop_fine_scale(args) -> int:
    cfg = _config_from_args(args)
    if not args.config:
        _rough_defaults(cfg)
        cfg.name = "drop_fine_scale"
    res = harness.run_drop_beta_prime(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    export_rate_table_csv(res["full"], out / f"{cfg.name}_full.csv")
    export_rate_table_csv(res["dropped"], out / f"{cfg.name}_dropped.csv")
    for h, ratio in zip(res["full"].h, res["ratios"]):
        flag = "  (degraded)" if ratio > 2.0 else ""
        print(f"h = {h:.4g}: dropped/full = {ratio:.3f}{flag}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cipflow", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="INI experiment config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out-dir", default=None)
        sp.add_argument("--tau-f-reading", choices=["literal", "max", "tilde"],
                        default=None)
        sp.add_argument("--level", type=int, default=None,
                        help="mesh level (default: first configured level)")

    sp = sub.add_parser("mesh", help="generate a mesh and print statistics")
    sp.add_argument("--generator", choices=["square", "disc"], default="square")
    sp.add_argument("--n", type=int, default=8,
                    help="cells per side (square) or refinements (disc)")
    sp.add_argument("--n-boundary", type=int, default=6)
    sp.add_argument("--out", help="write the mesh in the ASCII format")
    sp.set_defaults(fn=cmd_mesh)

    sp = sub.add_parser("solve", help="one forward solve with exports")
    common(sp)
    sp.add_argument("--integrator", default="cn_implicit_stab",
                    choices=["cn_implicit_stab", "cn_explicit_stab",
                             "backward_euler"])
    sp.add_argument("--stride", type=int, default=1)
    sp.set_defaults(fn=cmd_solve)

    sp = sub.add_parser("filter", help="Helmholtz-filter a final solution")
    common(sp)
    sp.set_defaults(fn=cmd_filter)

    sp = sub.add_parser("estimate", help="a posteriori estimate for one run")
    common(sp)
    sp.add_argument("--measure", action="store_true",
                    help="also measure against an overkill reference")
    sp.set_defaults(fn=cmd_estimate)

    sp = sub.add_parser("dual-check", help="error representation check")
    common(sp)
    sp.add_argument("--mode", choices=["discrete", "estimate"],
                    default="discrete")
    sp.add_argument("--dual-refines", type=int, default=1)
    sp.set_defaults(fn=cmd_dual_check)

    sp = sub.add_parser("convergence", help="rotating Gaussian rate study")
    common(sp)
    sp.set_defaults(fn=cmd_convergence)

    sp = sub.add_parser("rough-data", help="filtered-error sweep, rough data")
    common(sp)
    sp.add_argument("--with-galerkin", action="store_true")
    sp.set_defaults(fn=cmd_rough_data)

    sp = sub.add_parser("drop-fine-scale", help="full vs coarse-only advection")
    common(sp)
    sp.set_defaults(fn=cmd_drop_fine_scale)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
