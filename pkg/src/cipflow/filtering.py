"""Differential (Helmholtz) filter and filtered-error estimation.

The filter solves (s K + M) x = M e on the zero-trace space, where the
smoothing scale s is the square of the filter width.  The a posteriori
estimator evaluates the residual terms of the filtered-error bound on a
full trajectory and multiplies by exp(T / tau_F) (h / s)^{1/2}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse.linalg as spla

from . import fem, velocity as vel
from .fem import FeSpace, FeFunction, SolverFailure, QUAD_NORMS
from .mesh import Mesh, refine_uniform
from .solver import (ProblemSetup, TrajectoryRecord, LinearSolverConfig,
                     SchemeOperators, run_forward, run_dual)

TERM_NAMES = ("T1_convective_inf", "T2_element_residual", "T3_face_jump",
              "T4_stabilization", "T5_data_osc_f", "T6_data_osc_u0")

CSV_COLUMNS = ("h", "h_frak", "gamma", "mu", "T", "tau_F",
               "T1", "T2", "T3", "T4", "T5", "T6",
               "prefactor", "total", "measured", "effectivity")


@dataclass
class FilterConfig:
    """``h_frak`` is the smoothing scale (filter width squared)."""
    h_frak: float = 0.01
    solver: LinearSolverConfig = dc_field(
        default_factory=lambda: LinearSolverConfig(kind="cg", rtol=1e-12,
                                                   max_iters=20000))

    def __post_init__(self):
        if self.h_frak <= 0:
            raise ValueError("filter scale must be positive")


@dataclass
class ErrorReport:
    """Term-by-term estimator breakdown for one run."""
    terms: dict
    prefactor: float
    total_estimate: float
    h: float
    h_frak: float
    gamma: float
    mu: float
    T: float
    tau_F: float
    measured_filtered_error: float | None = None
    effectivity: float | None = None

    def csv_row(self) -> str:
        vals = [self.h, self.h_frak, self.gamma, self.mu, self.T, self.tau_F]
        vals += [self.terms[k] for k in TERM_NAMES]
        vals += [self.prefactor, self.total_estimate]
        vals.append("" if self.measured_filtered_error is None
                    else self.measured_filtered_error)
        vals.append("" if self.effectivity is None else self.effectivity)
        return ",".join("" if v == "" else f"{v:.17g}" for v in vals)

    def text_block(self) -> str:
        lines = [f"h = {self.h:.17g}", f"h_frak = {self.h_frak:.17g}",
                 f"gamma = {self.gamma:.17g}", f"mu = {self.mu:.17g}",
                 f"T = {self.T:.17g}", f"tau_F = {self.tau_F:.17g}"]
        lines += [f"{k} = {self.terms[k]:.17g}" for k in TERM_NAMES]
        lines += [f"prefactor = {self.prefactor:.17g}",
                  f"total = {self.total_estimate:.17g}"]
        if self.measured_filtered_error is not None:
            lines.append(f"measured = {self.measured_filtered_error:.17g}")
        if self.effectivity is not None:
            lines.append(f"effectivity = {self.effectivity:.17g}")
        return "\n".join(lines)


def _filter_matrix(space: FeSpace, h_frak: float):
    M = fem.assemble_mass(space)
    K = fem.assemble_stiffness(space)
    return M, K, (h_frak * K + M).tocsr()


def helmholtz_filter(e: FeFunction, cfg: FilterConfig,
                     _mats=None) -> FeFunction:
    """Solve (s K + M) x = M e on the zero-trace space (SPD, CG)."""
    mesh = e.mesh
    space = FeSpace.create(mesh)
    M, K, A = _mats if _mats is not None else _filter_matrix(space, cfg.h_frak)
    idx = mesh.interior_vertex_indices()
    ix = np.ix_(idx, idx)
    Ai = A[ix].tocsr()
    b = (M @ e.coefficients)[idx]
    x = np.zeros(mesh.n_vertices)
    if np.linalg.norm(b) == 0.0:
        return FeFunction(mesh, x, constrained=True)
    diag = Ai.diagonal()
    prec = spla.LinearOperator(Ai.shape, lambda v: v / diag)
    xi, info = spla.cg(Ai, b, rtol=cfg.solver.rtol,
                       maxiter=cfg.solver.max_iters, M=prec)
    res = np.linalg.norm(Ai @ xi - b) / np.linalg.norm(b)
    if info != 0 or res > 10 * cfg.solver.rtol:
        raise SolverFailure("filter solve failed", x=xi, residual=res)
    x[idx] = xi
    return FeFunction(mesh, x, constrained=True)


def filtered_norm(e_tilde: FeFunction, e: FeFunction, cfg: FilterConfig,
                  _mats=None) -> dict:
    """Filtered norm and the residual of the identity ||e~||_s^2 = (e, e~)."""
    space = FeSpace.create(e_tilde.mesh)
    if _mats is not None:
        M, K, _ = _mats
    else:
        M = fem.assemble_mass(space)
        K = fem.assemble_stiffness(space)
    ce, ct = e.coefficients, e_tilde.coefficients
    norm_sq = cfg.h_frak * float(ct @ (K @ ct)) + float(ct @ (M @ ct))
    pairing = float(ct @ (M @ ce))
    residual = abs(norm_sq - pairing) / norm_sq if norm_sq > 0 else 0.0
    return {"norm_h": math.sqrt(max(norm_sq, 0.0)),
            "identity_residual": residual}


def _load_from_quad_values(space: FeSpace, vals, rule=QUAD_NORMS) -> np.ndarray:
    """b_i = int g phi_i for g given by values (Nt, nq) at quadrature points."""
    contrib = np.einsum("q,tq,qi->ti", rule.weights, vals, rule.points)
    contrib *= space.areas[:, None]
    b = np.zeros(space.n_dofs)
    np.add.at(b, space.mesh.triangles, contrib)
    return b


def _best_l2_distance_sq(space, M_fact, vals, rule=QUAD_NORMS) -> float:
    """min over v_h of int (g - v_h)^2 via the L2 projection onto V_h."""
    b = _load_from_quad_values(space, vals, rule)
    x = M_fact(b)
    total = fem.quadrature_l2sq(space, vals, rule)
    return max(total - float(b @ x), 0.0)


def select_tau_F(setup: ProblemSetup, reading: str = "max",
                 n_time_samples: int = 5) -> float:
    """tau_F per the configured reading: literal, max, or tilde."""
    ts = (np.linspace(0.0, setup.T, n_time_samples)
          if setup.field.time_dependent else np.array([0.0]))
    if reading == "tilde":
        return vel.compute_sigma_p_lambda(setup.field, setup.mu, setup.mesh, ts)
    lit, mx = vel.compute_tau_F(setup.field, setup.mu, ts, mesh=setup.mesh)
    if reading == "literal":
        return lit
    if reading == "max":
        return mx
    raise ValueError(f"unknown tau_F reading {reading!r}")


def a_posteriori_estimate(traj: TrajectoryRecord, setup: ProblemSetup,
                          cfg: FilterConfig,
                          tau_F_choice: str = "max") -> ErrorReport:
    """Residual-based upper bound of the filtered terminal error.

    Term 1 realizes the convective infimum with the computable surrogate
    v_h = projection of (beta . grad u_h); term 2 vanishes for P1 but is
    computed by the general elementwise formula; face, stabilization and
    data-oscillation terms follow their definitions, all time integrals
    by the trapezoid rule over steps.
    """
    if traj.stride != 1:
        raise ValueError("estimator requires a stride-1 trajectory")
    mesh = setup.mesh
    space = FeSpace.create(mesh)
    M = fem.assemble_mass(space)
    M_lu = spla.splu(M.tocsc())
    M_fact = M_lu.solve
    h = mesh.h_max
    tau = traj.tau
    times = traj.times
    n_steps = len(times) - 1

    xq = space.quad_points(QUAD_NORMS)
    nt, nq, _ = xq.shape
    flat = xq.reshape(-1, 2)
    interior = np.flatnonzero(mesh.interior_face_mask)
    hf = mesh.face_lengths[interior]
    nrm = mesh.face_normals[interior]
    left = mesh.face_left[interior]
    right = mesh.face_right[interior]

    weight = (setup.field if setup.weight_field == "full_beta"
              else setup.field.coarse_only())
    static = not setup.field.time_dependent
    beta_q = None
    S = None

    t1_vals = np.empty(n_steps + 1)
    t3_vals = np.empty(n_steps + 1)
    t4_vals = np.empty(n_steps + 1)
    t5_vals = np.empty(n_steps + 1)
    for n, t in enumerate(times):
        if beta_q is None or setup.field.time_dependent:
            beta_q = setup.field(flat, t).reshape(nt, nq, 2)
        if setup.method == "cip" and setup.gamma > 0 and (S is None or not static):
            S = fem.assemble_cip(space, weight, t, setup.gamma)
        u = traj.snapshots[n]
        grad_u = np.einsum("tk,tkd->td", u[mesh.triangles], space.gradients)
        g = np.einsum("tqd,td->tq", beta_q, grad_u)
        t1_vals[n] = math.sqrt(h * _best_l2_distance_sq(space, M_fact, g))
        jump = (np.einsum("fd,fd->f", grad_u[left], nrm)
                - np.einsum("fd,fd->f", grad_u[right], nrm))
        t3_vals[n] = setup.mu * math.sqrt(float(np.sum(jump ** 2 * hf)))
        t4_vals[n] = (math.sqrt(max(float(u @ (S @ u)), 0.0))
                      if S is not None else 0.0)
        if setup.f is not None:
            fq = np.asarray(setup.f(flat, t), dtype=float).reshape(nt, nq)
            t5_vals[n] = math.sqrt(_best_l2_distance_sq(space, M_fact, fq))
        else:
            t5_vals[n] = 0.0

    def t_int(vals):
        return float(np.trapezoid(vals, dx=tau)) if n_steps > 0 else 0.0

    if setup.u0 is not None and not isinstance(setup.u0, (FeFunction, np.ndarray)):
        u0q = np.asarray(setup.u0(flat), dtype=float).reshape(nt, nq)
        t6 = math.sqrt(h) * math.sqrt(_best_l2_distance_sq(space, M_fact, u0q))
    else:
        t6 = 0.0  # coefficient data is already in V_h

    terms = {
        "T1_convective_inf": t_int(t1_vals),
        "T2_element_residual": 0.0,  # P1: elementwise Laplacian vanishes
        "T3_face_jump": t_int(t3_vals),
        "T4_stabilization": t_int(t4_vals),
        "T5_data_osc_f": math.sqrt(h) * t_int(t5_vals),
        "T6_data_osc_u0": t6,
    }
    tau_F = select_tau_F(setup, tau_F_choice)
    c_t = math.exp(setup.T / tau_F) if math.isfinite(tau_F) else 1.0
    prefactor = c_t * math.sqrt(h / cfg.h_frak)
    total = prefactor * sum(terms.values())
    return ErrorReport(terms=terms, prefactor=prefactor, total_estimate=total,
                       h=h, h_frak=cfg.h_frak, gamma=setup.gamma, mu=setup.mu,
                       T=setup.T, tau_F=tau_F)


def _check_nested(coarse: Mesh, fine: Mesh) -> None:
    from scipy.spatial import cKDTree
    tree = cKDTree(fine.vertices)
    d, _ = tree.query(coarse.vertices, k=1)
    if d.max() > 1e-10 * max(coarse.h_max, 1.0):
        raise ValueError("meshes are not nested (coarse vertices missing)")


def measure_filtered_error(u_h_final: FeFunction, reference_final: FeFunction,
                           cfg: FilterConfig) -> dict:
    """Filtered norm of (reference - injected coarse solution).

    Both functions must live on nested meshes; the coarse solution is
    transferred by vertex evaluation, exact for nested P1.
    """
    fine_mesh = reference_final.mesh
    if u_h_final.mesh is not fine_mesh:
        _check_nested(u_h_final.mesh, fine_mesh)
        injected = fem.interpolate_at_points(
            u_h_final.mesh, u_h_final.coefficients, fine_mesh.vertices)
    else:
        injected = u_h_final.coefficients
    e = FeFunction(fine_mesh, reference_final.coefficients - injected,
                   constrained=True)
    space = FeSpace.create(fine_mesh)
    mats = _filter_matrix(space, cfg.h_frak)
    e_tilde = helmholtz_filter(e, cfg, _mats=mats)
    norm = filtered_norm(e_tilde, e, cfg, _mats=mats)
    return {"norm_h": norm["norm_h"],
            "identity_residual": norm["identity_residual"],
            "e_tilde": e_tilde, "e": e}


def effectivity(report: ErrorReport, measured: float) -> float:
    """Estimate/measured ratio; +inf with a flag when measured is zero."""
    report.measured_filtered_error = measured
    if measured == 0.0:
        report.effectivity = math.inf
        return math.inf
    report.effectivity = report.total_estimate / measured
    return report.effectivity


# -- error representation / dual checks ------------------------------------

def discrete_duality_gap(setup: ProblemSetup, tau: float,
                         integrator: str = "cn_implicit_stab",
                         psi=None) -> dict:
    """Mode (a): forward chain vs transposed backward chain, same mesh/steps.

    lhs = (u^N, psi)_M; rhs = (u^0, phi^0)_M plus the dual pairing of
    the per-step load vectors.  Exact up to roundoff by construction.
    """
    traj = run_forward(setup, tau, integrator=integrator)
    ops = SchemeOperators(setup, tau, integrator)
    idx = ops.idx
    if psi is None:
        cfg = FilterConfig()
        psi = helmholtz_filter(traj.final(), cfg).coefficients
    elif isinstance(psi, FeFunction):
        psi = psi.coefficients
    dual = run_dual(setup, psi, tau, integrator=integrator)

    uN = traj.snapshots[-1][idx]
    u0 = traj.snapshots[0][idx]
    lhs = float(uN @ (ops.M @ psi[idx]))
    phi0 = dual.snapshots[0][idx]
    rhs = float(u0 @ (ops.M @ phi0))
    if setup.f is not None:
        n_steps = len(traj.times) - 1
        for n in range(n_steps):
            b = ops.load(n)
            rhs += float(b @ dual.dual_intermediates[n + 1])
    scale = max(abs(lhs), abs(rhs), 1e-300)
    return {"lhs": lhs, "rhs": rhs, "rel_gap": abs(lhs - rhs) / scale}


def error_representation_estimate(setup: ProblemSetup, tau: float,
                                  cfg: FilterConfig, dual_refines: int = 1,
                                  psi=None) -> dict:
    """Mode (b): continuous error representation with an approximate dual.

    e is the difference between a one-level nested reference solve and
    the injected coarse solve; the dual is solved on a mesh refined
    ``dual_refines`` times from the coarse mesh.  The pairing integrals
    use the trapezoid rule in time, so the gap reflects the dual
    discretization error and shrinks under dual-mesh refinement.
    """
    e_mesh = refine_uniform(setup.mesh)
    traj_c = run_forward(setup, tau)
    setup_f = ProblemSetup(mesh=e_mesh, mu=setup.mu, field=setup.field,
                           T=setup.T, u0=setup.u0, f=setup.f,
                           gamma=setup.gamma, method=setup.method,
                           weight_field=setup.weight_field)
    traj_f = run_forward(setup_f, tau)

    # error trajectory on the e-mesh
    es = []
    for n in range(len(traj_c.times)):
        injected = fem.interpolate_at_points(setup.mesh, traj_c.snapshots[n],
                                             e_mesh.vertices)
        ec = traj_f.snapshots[n] - injected
        ec[e_mesh.boundary_vertex_flags] = 0.0
        es.append(ec)

    # dual mesh: nested refinement of the coarse mesh
    d_mesh = setup.mesh
    for _ in range(dual_refines):
        d_mesh = refine_uniform(d_mesh)
    pair_mesh = d_mesh if dual_refines >= 1 else e_mesh

    e_final = FeFunction(e_mesh, es[-1], constrained=True)
    if psi is None:
        psi_fn = helmholtz_filter(e_final, cfg)
        psi_pair = fem.interpolate_at_points(e_mesh, psi_fn.coefficients,
                                             pair_mesh.vertices)
        psi_dual = fem.interpolate_at_points(e_mesh, psi_fn.coefficients,
                                             d_mesh.vertices)
    else:
        raise NotImplementedError("custom terminal data uses mode (a)")

    setup_d = ProblemSetup(mesh=d_mesh, mu=setup.mu, field=setup.field,
                           T=setup.T, gamma=0.0, method="galerkin")
    dual = run_dual(setup_d, psi_dual, tau)

    # all pairings on the finer of (e_mesh, d_mesh)
    space_p = FeSpace.create(pair_mesh)
    Mp = fem.assemble_mass(space_p)
    Kp = fem.assemble_stiffness(space_p)

    def to_pair(mesh_from, coeffs):
        if mesh_from is pair_mesh:
            return coeffs
        return fem.interpolate_at_points(mesh_from, coeffs, pair_mesh.vertices)

    n_steps = len(traj_c.times) - 1
    e_pair = [to_pair(e_mesh, e) for e in es]
    phi_pair = [to_pair(d_mesh, p) for p in dual.snapshots]

    lhs = float(e_pair[-1] @ (Mp @ psi_pair))
    rhs = float(e_pair[0] @ (Mp @ phi_pair[0]))
    # (d_t e, phi): exact for pw-linear-in-time e, midpoint phi
    for n in range(n_steps):
        de = e_pair[n + 1] - e_pair[n]
        phm = 0.5 * (phi_pair[n] + phi_pair[n + 1])
        rhs += float(de @ (Mp @ phm))
    # int a(e, phi) dt by trapezoid
    static = not setup.field.time_dependent
    Cp = None
    a_vals = np.empty(n_steps + 1)
    for n, t in enumerate(traj_c.times):
        if Cp is None or not static:
            Cp = fem.assemble_convection(space_p, setup.field, t)
        a_vals[n] = float(phi_pair[n] @ (Cp @ e_pair[n])
                          + setup.mu * (phi_pair[n] @ (Kp @ e_pair[n])))
    rhs += float(np.trapezoid(a_vals, dx=tau))
    scale = max(abs(lhs), abs(rhs), 1e-300)
    return {"lhs": lhs, "rhs": rhs, "rel_gap": abs(lhs - rhs) / scale}


def error_representation_check(setup: ProblemSetup, tau: float,
                               psi_source="filtered_error", mode: str = "discrete",
                               cfg: FilterConfig | None = None,
                               dual_refines: int = 1) -> dict:
    """Dispatch between the exact discrete-duality check and the
    approximate continuous-dual estimate."""
    if mode == "discrete":
        psi = None if psi_source == "filtered_error" else psi_source
        return discrete_duality_gap(setup, tau, psi=psi)
    if mode == "estimate":
        return error_representation_estimate(setup, tau, cfg or FilterConfig(),
                                             dual_refines=dual_refines)
    raise ValueError(f"unknown mode {mode!r}")
