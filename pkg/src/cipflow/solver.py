"""Linear solvers and Crank-Nicolson time integration.

Forward solves of the standard Galerkin and CIP-stabilized schemes with
explicit or implicit treatment of the stabilization matrix, the
discrete-adjoint backward (dual) solve, and per-step stability
monitors.  Dirichlet conditions are imposed strongly by restricting all
systems to interior vertices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .fem import FeSpace, FeFunction, SolverFailure
from .mesh import Mesh
from .velocity import VelocityField

DIRECT_SIZE_LIMIT = 20000

INTEGRATORS = ("cn_implicit_stab", "cn_explicit_stab", "backward_euler")


@dataclass
class LinearSolverConfig:
    """kind: auto | direct_small | cg | bicgstab."""
    kind: str = "auto"
    rtol: float = 1e-12
    max_iters: int = 2000

    def __post_init__(self):
        if not (0.0 < self.rtol <= 1e-4):
            raise ValueError("rtol must be in (0, 1e-4]")


def solve_linear(A, b, config: LinearSolverConfig = LinearSolverConfig()):
    """Solve A x = b; returns (x, relative_residual, iterations).

    direct_small refuses systems above 20000 unknowns; cg requires a
    symmetric matrix (checked structurally); bicgstab is the choice for
    convection systems.  ``auto`` picks direct below the size limit and
    ILU-preconditioned bicgstab above it.
    """
    A = sp.csr_matrix(A)
    n = A.shape[0]
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0.0, 0
    kind = config.kind
    if kind == "auto":
        kind = "direct_small" if n <= DIRECT_SIZE_LIMIT else "bicgstab"
    if kind == "direct_small":
        if n > DIRECT_SIZE_LIMIT:
            raise ValueError(f"direct_small limited to n <= {DIRECT_SIZE_LIMIT}")
        x = spla.spsolve(A.tocsc(), b)
        res = np.linalg.norm(A @ x - b) / bnorm
        if not np.isfinite(res):
            raise SolverFailure("direct solve produced non-finite result",
                                x=x, residual=res)
        return x, res, 1

    iters = 0

    def count(_):
        nonlocal iters
        iters += 1

    if kind == "cg":
        if (abs(A - A.T) > 1e-12 * max(abs(A).max(), 1.0)).nnz:
            raise ValueError("cg requires a symmetric matrix")
        x, info = spla.cg(A, b, rtol=config.rtol, maxiter=config.max_iters,
                          callback=count)
    elif kind == "bicgstab":
        try:
            ilu = spla.spilu(A.tocsc(), drop_tol=1e-5, fill_factor=20)
            prec = spla.LinearOperator(A.shape, ilu.solve)
        except RuntimeError:
            prec = None
        x, info = spla.bicgstab(A, b, rtol=config.rtol, maxiter=config.max_iters,
                                M=prec, callback=count)
    else:
        raise ValueError(f"unknown solver kind {kind!r}")
    res = np.linalg.norm(A @ x - b) / bnorm
    if info != 0 or res > 10 * config.rtol:
        raise SolverFailure(f"{kind} failed (info={info})", x=x, residual=res)
    return x, res, iters


class _Factorized:
    """Reusable solver for one step matrix (direct or preconditioned)."""

    def __init__(self, A, config: LinearSolverConfig):
        self.A = sp.csc_matrix(A)
        self.config = config
        self.direct = self.A.shape[0] <= DIRECT_SIZE_LIMIT or config.kind == "direct_small"
        if self.direct:
            self.lu = spla.splu(self.A)
            self.lu_t = None
        else:
            self.ilu = spla.spilu(self.A, drop_tol=1e-5, fill_factor=20)
            self.prec = spla.LinearOperator(self.A.shape, self.ilu.solve)
            At = self.A.T.tocsc()
            self.ilu_t = spla.spilu(At, drop_tol=1e-5, fill_factor=20)
            self.prec_t = spla.LinearOperator(At.shape, self.ilu_t.solve)

    def solve(self, b, x0=None, transpose=False):
        if self.direct:
            return self.lu.solve(b, trans="T" if transpose else "N")
        A = self.A.T if transpose else self.A
        prec = self.prec_t if transpose else self.prec
        x, info = spla.bicgstab(A, b, x0=x0, rtol=self.config.rtol,
                                maxiter=self.config.max_iters, M=prec)
        res = np.linalg.norm(A @ x - b) / max(np.linalg.norm(b), 1e-300)
        if info != 0 or res > 100 * self.config.rtol:
            raise SolverFailure("step solve failed", x=x, residual=res)
        return x


@dataclass
class ProblemSetup:
    """Transient convection-diffusion run description.

    ``method``: 'galerkin' or 'cip'; ``weight_field``: 'full_beta' or
    'coarse_only' selects the velocity entering the stabilization
    weight (the latter is the unknown-fine-scale scenario).
    """
    mesh: Mesh
    mu: float
    field: VelocityField
    T: float
    u0: object = None            # callable (N,2) -> (N,), or coefficient array
    f: object = None             # callable ((N,2), t) -> (N,), or None
    gamma: float = 0.01
    method: str = "cip"
    weight_field: str = "full_beta"
    solver: LinearSolverConfig = dc_field(default_factory=LinearSolverConfig)

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.T < 0:
            raise ValueError("T must be nonnegative")
        if self.method not in ("galerkin", "cip"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.weight_field not in ("full_beta", "coarse_only"):
            raise ValueError(f"unknown weight_field {self.weight_field!r}")


@dataclass
class TrajectoryRecord:
    """Snapshots and per-step norm monitors of one transient solve."""
    times: np.ndarray              # every step time (monitors align with these)
    snapshots: list                # full-length coefficient arrays
    snapshot_times: np.ndarray     # times of the recorded snapshots
    l2: np.ndarray
    h1_mu: np.ndarray              # sqrt(mu) * |u|_H1
    s_val: np.ndarray              # s_h(u, u)
    triple_norm: float             # time-integrated stability norm
    stride: int
    tau: float
    integrator: str
    setup: ProblemSetup
    dual_intermediates: list | None = None

    @property
    def sup_l2(self) -> float:
        return float(self.l2.max())

    def final(self) -> FeFunction:
        return FeFunction(self.setup.mesh, self.snapshots[-1], constrained=True)


class SchemeOperators:
    """Per-step matrices of the theta=1/2 scheme on interior DOFs.

    Step n advances t_n -> t_{n+1} by L_n u^{n+1} = R_n u^n + b_n with
    L_n = M/tau + A(t_{n+1})/2 and R_n = M/tau - A(t_n)/2, where
    A = C + mu K, plus the stabilization matrix S: inside A for
    implicit treatment, moved fully to the right-hand side at the old
    level for explicit treatment.  Backward Euler uses L = M/tau + A,
    R = M/tau.  For a time-independent field everything is assembled
    and factorized once.
    """

    def __init__(self, setup: ProblemSetup, tau: float, integrator: str):
        if integrator not in INTEGRATORS:
            raise ValueError(f"unknown integrator {integrator!r}")
        self.setup = setup
        self.tau = tau
        self.integrator = integrator
        self.space = FeSpace.create(setup.mesh)
        self.idx = setup.mesh.interior_vertex_indices()
        ix = np.ix_(self.idx, self.idx)
        self.M_full = fem.assemble_mass(self.space)
        self.K_full = fem.assemble_stiffness(self.space)
        self.M = self.M_full[ix].tocsr()
        self.K = self.K_full[ix].tocsr()
        self.static = not setup.field.time_dependent
        self._cache = {}
        self._fact_cache = {}
        self.n_steps = max(int(round(setup.T / tau)), 0) if setup.T > 0 else 0

    def _S_full(self, t: float):
        setup = self.setup
        if setup.method != "cip" or setup.gamma == 0.0:
            n = self.space.n_dofs
            return sp.csr_matrix((n, n))
        weight = (setup.field if setup.weight_field == "full_beta"
                  else setup.field.coarse_only())
        return fem.assemble_cip(self.space, weight, t, setup.gamma)

    def matrices_at(self, t: float):
        """(A_interior, S_interior) with A = C + mu K (no stabilization)."""
        key = 0.0 if self.static else t
        if key in self._cache:
            return self._cache[key]
        ix = np.ix_(self.idx, self.idx)
        C = fem.assemble_convection(self.space, self.setup.field, t)[ix].tocsr()
        S = self._S_full(t)[ix].tocsr()
        A = C + self.setup.mu * self.K
        self._cache[key] = (A, S)
        return A, S

    def step_matrices(self, n: int):
        """(L_n, R_n) interior sparse matrices for step n."""
        t0 = n * self.tau
        t1 = (n + 1) * self.tau
        A0, S0 = self.matrices_at(t0)
        A1, S1 = self.matrices_at(t1)
        Mt = self.M / self.tau
        if self.integrator == "backward_euler":
            return (Mt + A1 + S1).tocsr(), Mt.tocsr()
        if self.integrator == "cn_implicit_stab":
            L = Mt + 0.5 * (A1 + S1)
            R = Mt - 0.5 * (A0 + S0)
        else:  # cn_explicit_stab: S fully at the old level
            L = Mt + 0.5 * A1
            R = Mt - 0.5 * A0 - S0
        return L.tocsr(), R.tocsr()

    def factorized(self, n: int) -> _Factorized:
        key = 0 if self.static else n
        if key not in self._fact_cache:
            L, _ = self.step_matrices(n)
            self._fact_cache[key] = _Factorized(L, self.setup.solver)
        return self._fact_cache[key]

    def load(self, n: int):
        """Interior load vector b_n (Crank-Nicolson average of f)."""
        if self.setup.f is None:
            return None
        t0 = n * self.tau
        t1 = (n + 1) * self.tau
        b0 = fem.assemble_load(self.space, self.setup.f, t0)
        if self.integrator == "backward_euler":
            return fem.assemble_load(self.space, self.setup.f, t1)[self.idx]
        b1 = fem.assemble_load(self.space, self.setup.f, t1)
        return 0.5 * (b0 + b1)[self.idx]

    def initial_coefficients(self) -> np.ndarray:
        """u_h(0) = L2 projection of u0 onto the zero-trace space."""
        u0 = self.setup.u0
        n = self.space.n_dofs
        if u0 is None:
            return np.zeros(n)
        if isinstance(u0, FeFunction):
            return u0.coefficients.copy()
        if isinstance(u0, np.ndarray):
            out = u0.astype(float).copy()
            out[self.setup.mesh.boundary_vertex_flags] = 0.0
            return out
        return fem.l2_project(self.space, u0, constrained=True).coefficients


def _monitor(ops: SchemeOperators, S, ui):
    l2 = math.sqrt(max(ui @ (ops.M @ ui), 0.0))
    h1 = math.sqrt(max(ui @ (ops.K @ ui), 0.0))
    sv = float(ui @ (S @ ui))
    return l2, math.sqrt(ops.setup.mu) * h1, sv


def run_forward(setup: ProblemSetup, tau: float,
                integrator: str = "cn_implicit_stab",
                stride: int = 1) -> TrajectoryRecord:
    """Time-step the (possibly stabilized) scheme from t=0 to t=T."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    n_steps = int(round(setup.T / tau))
    if setup.T > 0 and abs(n_steps * tau - setup.T) > 1e-9 * setup.T:
        raise ValueError("tau must divide T")
    ops = SchemeOperators(setup, tau, integrator)
    idx = ops.idx

    u_full = ops.initial_coefficients()
    ui = u_full[idx]

    _, S0 = ops.matrices_at(0.0)
    l2s, h1s, svs = [], [], []
    snapshots = [u_full.copy()]
    snap_times = [0.0]
    m = _monitor(ops, S0, ui)
    l2s.append(m[0]); h1s.append(m[1]); svs.append(m[2])

    for n in range(n_steps):
        _, R = ops.step_matrices(n)
        rhs = R @ ui
        b = ops.load(n)
        if b is not None:
            rhs = rhs + b
        try:
            ui = ops.factorized(n).solve(rhs, x0=ui)
        except SolverFailure as exc:
            raise SolverFailure(f"step {n}: {exc}", x=exc.x,
                                residual=exc.residual) from exc
        if not np.all(np.isfinite(ui)):
            raise SolverFailure(f"non-finite solution at step {n}")
        _, S = ops.matrices_at((n + 1) * tau)
        m = _monitor(ops, S, ui)
        l2s.append(m[0]); h1s.append(m[1]); svs.append(m[2])
        if (n + 1) % stride == 0 or n + 1 == n_steps:
            full = np.zeros(ops.space.n_dofs)
            full[idx] = ui
            snapshots.append(full)
            snap_times.append((n + 1) * tau)

    l2s = np.array(l2s)
    h1s = np.array(h1s)
    svs = np.array(svs)
    integrand = h1s ** 2 + svs
    triple = math.sqrt(max(np.trapezoid(integrand, dx=tau), 0.0)) if n_steps else 0.0
    return TrajectoryRecord(times=np.arange(n_steps + 1) * tau,
                            snapshots=snapshots,
                            snapshot_times=np.array(snap_times),
                            l2=l2s, h1_mu=h1s, s_val=svs,
                            triple_norm=triple, stride=stride, tau=tau,
                            integrator=integrator, setup=setup)


def run_dual(setup: ProblemSetup, psi, tau: float,
             integrator: str = "cn_implicit_stab") -> TrajectoryRecord:
    """Backward dual solve paired exactly with the forward scheme.

    The dual recursion uses the transposes of the forward step matrices:
    with z^N = M psi and z^n = R_n^T L_n^{-T} z^{n+1}, the vectors
    phi^n = M^{-1} z^n satisfy the discrete duality identity
    (u^N, psi)_M = (u^0, phi^0)_M + sum_n b_n . y^{n+1} to machine
    precision, where y^{n+1} = L_n^{-T} z^{n+1} are recorded in
    ``dual_intermediates`` for load pairings.
    """
    n_steps = int(round(setup.T / tau))
    if setup.T > 0 and abs(n_steps * tau - setup.T) > 1e-9 * setup.T:
        raise ValueError("tau must divide T")
    ops = SchemeOperators(setup, tau, integrator)
    idx = ops.idx
    if isinstance(psi, FeFunction):
        psi = psi.coefficients
    psi = np.asarray(psi, dtype=float)
    psi_i = psi[idx]

    M_fact = _Factorized(ops.M, setup.solver)
    z = ops.M @ psi_i
    phis = [None] * (n_steps + 1)
    ys = [None] * (n_steps + 1)
    phi_i = psi_i.copy()
    phis[n_steps] = phi_i

    _, S = ops.matrices_at(setup.T)
    l2s, h1s, svs = [], [], []
    m = _monitor(ops, S, phi_i)
    l2s.append(m[0]); h1s.append(m[1]); svs.append(m[2])

    for n in range(n_steps - 1, -1, -1):
        _, R = ops.step_matrices(n)
        y = ops.factorized(n).solve(z, transpose=True)
        ys[n + 1] = y
        z = R.T @ y
        phi_i = M_fact.solve(z, x0=phi_i)
        phis[n] = phi_i
        _, S = ops.matrices_at(n * tau)
        m = _monitor(ops, S, phi_i)
        l2s.append(m[0]); h1s.append(m[1]); svs.append(m[2])

    snapshots = []
    for p in phis:
        full = np.zeros(ops.space.n_dofs)
        full[idx] = p
        snapshots.append(full)
    l2s = np.array(l2s[::-1])
    h1s = np.array(h1s[::-1])
    svs = np.array(svs[::-1])
    integrand = h1s ** 2 + svs
    triple = math.sqrt(max(np.trapezoid(integrand, dx=tau), 0.0)) if n_steps else 0.0
    return TrajectoryRecord(times=np.arange(n_steps + 1) * tau,
                            snapshots=snapshots,
                            snapshot_times=np.arange(n_steps + 1) * tau,
                            l2=l2s, h1_mu=h1s, s_val=svs,
                            triple_norm=triple, stride=1, tau=tau,
                            integrator=integrator, setup=setup,
                            dual_intermediates=ys)


def data_norms(setup: ProblemSetup, tau: float) -> tuple[float, float]:
    """(integral of ||f(t)|| dt by trapezoid, ||u0||) of the run data."""
    mesh = setup.mesh
    zero = np.zeros(mesh.n_vertices)
    if setup.u0 is None:
        u0_norm = 0.0
    elif isinstance(setup.u0, (FeFunction, np.ndarray)):
        coeffs = setup.u0.coefficients if isinstance(setup.u0, FeFunction) else setup.u0
        space = FeSpace.create(mesh)
        M = fem.assemble_mass(space)
        u0_norm = math.sqrt(max(coeffs @ (M @ coeffs), 0.0))
    else:
        u0_norm = fem.error_l2(mesh, zero, lambda x: setup.u0(x))
    if setup.f is None:
        f_int = 0.0
    else:
        n_steps = max(int(round(setup.T / tau)), 1)
        ts = np.arange(n_steps + 1) * (setup.T / n_steps)
        vals = [fem.error_l2(mesh, zero, setup.f, t=t) for t in ts]
        f_int = float(np.trapezoid(vals, ts))
    return f_int, u0_norm


def stability_report(traj: TrajectoryRecord, setup: ProblemSetup) -> dict:
    """Measured quantities of the discrete stability bound.

    ratio = (sup_t ||u_h|| + triple norm) / (int ||f|| dt + ||u0||),
    guarded to 0 when both sides vanish.
    """
    f_int, u0_norm = data_norms(setup, traj.tau)
    bound_rhs = f_int + u0_norm
    lhs = traj.sup_l2 + traj.triple_norm
    ratio = lhs / bound_rhs if bound_rhs > 0 else 0.0
    return {
        "sup_L2": traj.sup_l2,
        "triple_norm": traj.triple_norm,
        "bound_rhs": bound_rhs,
        "ratio": ratio,
        "energy_sup": traj.sup_l2,
        "energy_h1_mu": float(np.sqrt(np.trapezoid(traj.h1_mu ** 2, dx=traj.tau)))
        if len(traj.times) > 1 else 0.0,
    }
