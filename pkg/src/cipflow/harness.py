"""Experiment recipes, convergence-rate tables and CSV/VTK export.

Every experiment is reproducible from its configuration alone: all
randomness is seeded and the seed is serialized into the outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import fem
from .filtering import (FilterConfig, CSV_COLUMNS,
                        a_posteriori_estimate, measure_filtered_error,
                        effectivity)
from .mesh import Mesh, generate_unit_square_mesh, generate_polygonal_disc_mesh, \
    refine_uniform
from .solver import ProblemSetup, TrajectoryRecord, run_forward
from .velocity import VelocityField, rigid_rotation, multiscale_square


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    """Declarative description of one experiment sweep."""
    name: str = "experiment"
    domain: str = "square"            # square | disc
    levels: list = dc_field(default_factory=lambda: [16, 32, 64])
    n_boundary: int = 6               # disc only
    mu: float = 1e-4
    gamma: float = 0.01
    h_frak: float = 0.01
    T: float = 0.5
    tau_rule: str = "tau_equals_h_over_c"   # fixed | tau_equals_h | tau_equals_h_over_c
    tau_fixed: float = 0.01
    tau_divisor: float = 4.0
    u0_kind: str = "gaussian"         # gaussian | checkerboard | random_pw
    u0_params: dict = dc_field(default_factory=dict)
    f_kind: str = "none"
    kappa: float = 8.0
    fine_amp: float | None = None     # default sqrt(mu)
    methods: list = dc_field(default_factory=lambda: ["cip_implicit"])
    ref_refines: int = 2
    seed: int = 0
    tau_f_reading: str = "max"
    out_dir: str = "out"

    def __post_init__(self):
        if len(self.levels) < 2:
            raise ConfigError("need at least 2 refinement levels for rates")


@dataclass
class RateTable:
    """(h, tau, value) rows with log-log fitted slope and pairwise rates."""
    quantity: str
    h: list = dc_field(default_factory=list)
    tau: list = dc_field(default_factory=list)
    values: list = dc_field(default_factory=list)

    def add(self, h, tau, value):
        self.h.append(float(h))
        self.tau.append(float(tau))
        self.values.append(float(value))

    def slope(self) -> float:
        return compute_rates(self)["slope"]

    def csv(self) -> str:
        lines = ["h,tau,value"]
        lines += [f"{h:.17g},{t:.17g},{v:.17g}"
                  for h, t, v in zip(self.h, self.tau, self.values)]
        return "\n".join(lines) + "\n"


def compute_rates(table: RateTable) -> dict:
    """Least-squares slope of log(value) vs log(h) plus pairwise rates.

    Non-positive values are excluded (flagged); the h sequence must be
    monotone for the slope to be meaningful.
    """
    h = np.asarray(table.h)
    v = np.asarray(table.values)
    if len(h) < 2:
        raise ValueError("need at least 2 levels")
    dh = np.diff(h)
    if not (np.all(dh < 0) or np.all(dh > 0)):
        raise ValueError("h sequence must be monotone")
    keep = v > 0
    excluded = int(np.count_nonzero(~keep))
    hk, vk = h[keep], v[keep]
    if len(hk) < 2:
        return {"slope": math.nan, "pairwise": [], "excluded": excluded}
    slope = float(np.polyfit(np.log(hk), np.log(vk), 1)[0])
    pairwise = [float(np.log(vk[i] / vk[i + 1]) / np.log(hk[i] / hk[i + 1]))
                for i in range(len(hk) - 1)]
    return {"slope": slope, "pairwise": pairwise, "excluded": excluded}


# -- initial data / sources -------------------------------------------------

def gaussian_bump(x0=(0.3, 0.0), sigma=0.1):
    x0 = np.asarray(x0, dtype=float)

    def u0(x):
        d2 = np.sum((np.atleast_2d(x) - x0) ** 2, axis=1)
        return np.exp(-d2 / (2.0 * sigma ** 2))

    return u0


def checkerboard(k=8):
    """+-1 on a k x k grid of cells over the unit square."""

    def u0(x):
        x = np.atleast_2d(x)
        i = np.floor(np.clip(x[:, 0], 0, 1 - 1e-12) * k).astype(int)
        j = np.floor(np.clip(x[:, 1], 0, 1 - 1e-12) * k).astype(int)
        return np.where((i + j) % 2 == 0, 1.0, -1.0)

    return u0


def random_piecewise(seed=0, k=8):
    """Seeded iid uniform(-1, 1) values on a k x k grid of cells."""
    rng = np.random.default_rng(seed)
    vals = rng.uniform(-1.0, 1.0, size=(k, k))

    def u0(x):
        x = np.atleast_2d(x)
        i = np.floor(np.clip(x[:, 0], 0, 1 - 1e-12) * k).astype(int)
        j = np.floor(np.clip(x[:, 1], 0, 1 - 1e-12) * k).astype(int)
        return vals[i, j]

    return u0


def make_u0(cfg: ExperimentConfig):
    p = cfg.u0_params
    if cfg.u0_kind == "gaussian":
        return gaussian_bump(p.get("x0", (0.3, 0.0)), p.get("sigma", 0.1))
    if cfg.u0_kind == "checkerboard":
        return checkerboard(int(p.get("k", 8)))
    if cfg.u0_kind == "random_pw":
        return random_piecewise(int(p.get("seed", cfg.seed)), int(p.get("k", 8)))
    raise ConfigError(f"unknown u0 kind {cfg.u0_kind!r}")


def choose_tau(cfg: ExperimentConfig, h: float) -> float:
    """Timestep from the rule, snapped so it divides T exactly."""
    if cfg.tau_rule == "fixed":
        target = cfg.tau_fixed
    elif cfg.tau_rule == "tau_equals_h":
        target = h
    elif cfg.tau_rule == "tau_equals_h_over_c":
        target = h / cfg.tau_divisor
    else:
        raise ConfigError(f"unknown tau rule {cfg.tau_rule!r}")
    n_steps = max(int(round(cfg.T / target)), 1)
    return cfg.T / n_steps


METHOD_TABLE = {
    "galerkin": ("galerkin", "cn_implicit_stab"),
    "cip_implicit": ("cip", "cn_implicit_stab"),
    "cip_explicit": ("cip", "cn_explicit_stab"),
}


def build_mesh(cfg: ExperimentConfig, level) -> Mesh:
    if cfg.domain == "square":
        return generate_unit_square_mesh(int(level))
    if cfg.domain == "disc":
        return generate_polygonal_disc_mesh(cfg.n_boundary, int(level))
    raise ConfigError(f"unknown domain {cfg.domain!r}")


# -- Figure-style rotating Gaussian experiment ------------------------------

def run_rotating_gaussian(cfg: ExperimentConfig) -> dict:
    """Gaussian convected one turn in the disc; L2 error rates at T.

    The oracle is the rotated initial Gaussian (the pure-advection exact
    solution; the O(mu T) diffusive perturbation is below discretization
    error at the default mu).  Returns one RateTable per method.
    """
    if cfg.domain != "disc":
        raise ConfigError("rotating Gaussian runs on the disc")
    u0 = make_u0(cfg)
    field = rigid_rotation((0.0, 0.0))

    def exact_at(t):
        c, s = math.cos(t), math.sin(t)

        def ex(x):
            x = np.atleast_2d(x)
            back = np.column_stack([c * x[:, 0] + s * x[:, 1],
                                    -s * x[:, 0] + c * x[:, 1]])
            return u0(back)

        return ex

    tables = {name: RateTable(quantity=f"L2_error_{name}")
              for name in cfg.methods}
    for level in cfg.levels:
        mesh = build_mesh(cfg, level)
        tau = choose_tau(cfg, mesh.h_max)
        for name in cfg.methods:
            method, integrator = METHOD_TABLE[name]
            setup = ProblemSetup(mesh=mesh, mu=cfg.mu, field=field, T=cfg.T,
                                 u0=u0, gamma=cfg.gamma if method == "cip" else 0.0,
                                 method=method)
            traj = run_forward(setup, tau, integrator=integrator,
                               stride=max(int(round(cfg.T / tau)), 1))
            err = fem.error_l2(mesh, traj.snapshots[-1], exact_at(cfg.T))
            tables[name].add(mesh.h_max, tau, err)
    return tables


# -- rough-data filtered-error experiments ----------------------------------

def make_field(cfg: ExperimentConfig) -> VelocityField:
    center = (0.5, 0.5) if cfg.domain == "square" else (0.0, 0.0)
    return multiscale_square(cfg.mu, kappa=cfg.kappa, amp=cfg.fine_amp,
                             center=center)


def overkill_reference(setup: ProblemSetup, tau: float,
                       ref_refines: int = 2) -> TrajectoryRecord:
    """Reference solve on the twice-refined nested mesh with tau/4."""
    mesh = setup.mesh
    for _ in range(ref_refines):
        mesh = refine_uniform(mesh)
    ref_setup = ProblemSetup(mesh=mesh, mu=setup.mu, field=setup.field,
                             T=setup.T, u0=setup.u0, f=setup.f,
                             gamma=setup.gamma, method=setup.method,
                             weight_field=setup.weight_field)
    n_steps = max(int(round(setup.T / (tau / 4.0))), 1)
    tau_ref = setup.T / n_steps
    return run_forward(ref_setup, tau_ref, stride=max(n_steps, 1))


def run_rough_data(cfg: ExperimentConfig, include_galerkin: bool = False) -> dict:
    """Filtered error vs overkill reference plus the a posteriori bound.

    Returns rate tables for the measured filtered error and the total
    estimate, the per-level ErrorReports, and warning flags (mesh
    Peclet not above 1, etc.).
    """
    u0 = make_u0(cfg)
    field = make_field(cfg)
    fcfg = FilterConfig(h_frak=cfg.h_frak)
    measured_t = RateTable(quantity="filtered_error")
    estimate_t = RateTable(quantity="total_estimate")
    galerkin_t = RateTable(quantity="filtered_error_galerkin")
    reports = []
    flags = []
    references = []
    for level in cfg.levels:
        mesh = build_mesh(cfg, level)
        tau = choose_tau(cfg, mesh.h_max)
        pe_h = mesh.h_max / cfg.mu  # U ~ 1 after normalization
        if pe_h <= 1.0:
            flags.append(f"level {level}: mesh Peclet {pe_h:.3g} <= 1")
        setup = ProblemSetup(mesh=mesh, mu=cfg.mu, field=field, T=cfg.T,
                             u0=u0, gamma=cfg.gamma, method="cip")
        traj = run_forward(setup, tau)
        ref = overkill_reference(setup, tau, cfg.ref_refines)
        references.append(ref)
        meas = measure_filtered_error(traj.final(), ref.final(), fcfg)
        report = a_posteriori_estimate(traj, setup, fcfg,
                                       tau_F_choice=cfg.tau_f_reading)
        effectivity(report, meas["norm_h"])
        reports.append(report)
        measured_t.add(mesh.h_max, tau, meas["norm_h"])
        estimate_t.add(mesh.h_max, tau, report.total_estimate)
        if include_galerkin:
            gsetup = ProblemSetup(mesh=mesh, mu=cfg.mu, field=field, T=cfg.T,
                                  u0=u0, gamma=0.0, method="galerkin")
            gtraj = run_forward(gsetup, tau)
            gmeas = measure_filtered_error(gtraj.final(), ref.final(), fcfg)
            galerkin_t.add(mesh.h_max, tau, gmeas["norm_h"])
    out = {"measured": measured_t, "estimate": estimate_t, "reports": reports,
           "flags": flags, "references": references}
    if include_galerkin:
        out["galerkin"] = galerkin_t
    return out


def run_drop_beta_prime(cfg: ExperimentConfig, references=None) -> dict:
    """Full-field vs coarse-only advection, measured against the same
    full-field overkill reference per level."""
    u0 = make_u0(cfg)
    field = make_field(cfg)
    fcfg = FilterConfig(h_frak=cfg.h_frak)
    full_t = RateTable(quantity="filtered_error_full")
    drop_t = RateTable(quantity="filtered_error_dropped")
    ratios = []
    for i, level in enumerate(cfg.levels):
        mesh = build_mesh(cfg, level)
        tau = choose_tau(cfg, mesh.h_max)
        setup_full = ProblemSetup(mesh=mesh, mu=cfg.mu, field=field, T=cfg.T,
                                  u0=u0, gamma=cfg.gamma, method="cip")
        setup_drop = ProblemSetup(mesh=mesh, mu=cfg.mu,
                                  field=field.coarse_only(), T=cfg.T,
                                  u0=u0, gamma=cfg.gamma, method="cip",
                                  weight_field="coarse_only")
        if references is not None:
            ref = references[i]
        else:
            ref = overkill_reference(setup_full, tau, cfg.ref_refines)
        m_full = measure_filtered_error(
            run_forward(setup_full, tau).final(), ref.final(), fcfg)
        m_drop = measure_filtered_error(
            run_forward(setup_drop, tau).final(), ref.final(), fcfg)
        full_t.add(mesh.h_max, tau, m_full["norm_h"])
        drop_t.add(mesh.h_max, tau, m_drop["norm_h"])
        ratios.append(m_drop["norm_h"] / m_full["norm_h"]
                      if m_full["norm_h"] > 0 else math.inf)
    return {"full": full_t, "dropped": drop_t, "ratios": ratios}


# -- export ------------------------------------------------------------------

def export_rate_table_csv(table: RateTable, path) -> None:
    Path(path).write_text(table.csv())


def parse_rate_table_csv(path) -> RateTable:
    lines = Path(path).read_text().strip().splitlines()
    if lines[0] != "h,tau,value":
        raise ValueError("bad rate table header")
    table = RateTable(quantity=Path(path).stem)
    for line in lines[1:]:
        h, t, v = (float(s) for s in line.split(","))
        table.add(h, t, v)
    return table


def export_reports_csv(reports, path) -> None:
    lines = [",".join(CSV_COLUMNS)]
    lines += [r.csv_row() for r in reports]
    Path(path).write_text("\n".join(lines) + "\n")


def export_vtk(mesh: Mesh, scalars: dict, path) -> None:
    """Legacy ASCII VTK unstructured grid with point-data scalar fields."""
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("cipflow field export\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_vertices} double\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.17g} {y:.17g} 0\n")
        nt = mesh.n_triangles
        fh.write(f"CELLS {nt} {4 * nt}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"3 {i} {j} {k}\n")
        fh.write(f"CELL_TYPES {nt}\n")
        fh.write("\n".join(["5"] * nt) + "\n")
        fh.write(f"POINT_DATA {mesh.n_vertices}\n")
        for name, values in scalars.items():
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            fh.write("\n".join(f"{v:.17g}" for v in values) + "\n")


def export_trajectory(traj: TrajectoryRecord, out_dir, basename="snapshot") -> list:
    """One VTK file per stored snapshot plus a CSV of the monitors."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mesh = traj.setup.mesh
    paths = []
    for i, snap in enumerate(traj.snapshots):
        p = out / f"{basename}_{i:04d}.vtk"
        export_vtk(mesh, {"u": snap}, p)
        paths.append(p)
    mon = out / f"{basename}_monitors.csv"
    with open(mon, "w") as fh:
        fh.write("t,l2,h1_mu,s_val\n")
        for t, a, b, c in zip(traj.times, traj.l2, traj.h1_mu, traj.s_val):
            fh.write(f"{t:.17g},{a:.17g},{b:.17g},{c:.17g}\n")
    paths.append(mon)
    return paths
