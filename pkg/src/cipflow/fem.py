"""P1 continuous finite elements on a triangulation.

Vectorized assembly of mass, stiffness, convection and interior-penalty
(gradient-jump) matrices, L2 projection, piecewise-constant velocity
projection and discrete norms.  Matrices are scipy CSR; assembly
accumulates element contributions in a fixed loop order (triangle index,
then face index), so results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import eigh

from .mesh import Mesh

# reference-triangle quadrature in barycentric coordinates.
# edge-midpoint rule: exact for degree 2.
TRI_QUAD_2 = (
    np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]),
    np.array([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]),
)
# 6-point Dunavant rule: exact for degree 4.
_a1, _b1 = 0.816847572980459, 0.091576213509771
_a2, _b2 = 0.108103018168070, 0.445948490915965
TRI_QUAD_4 = (
    np.array([
        [_a1, _b1, _b1], [_b1, _a1, _b1], [_b1, _b1, _a1],
        [_a2, _b2, _b2], [_b2, _a2, _b2], [_b2, _b2, _a2],
    ]),
    np.array([0.109951743655322] * 3 + [0.223381589678011] * 3),
)
# 3-point Gauss on [0,1] (degree 5), used on edges.
_g = np.sqrt(3.0 / 5.0)
EDGE_QUAD_3 = (0.5 * (1.0 + np.array([-_g, 0.0, _g])),
               np.array([5.0, 8.0, 5.0]) / 18.0)


@dataclass(frozen=True)
class QuadratureRule:
    """Barycentric points and weights on the reference triangle."""
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if not np.isclose(self.weights.sum(), 1.0):
            raise ValueError("weights must sum to the reference measure 1")


QUAD_ASSEMBLY = QuadratureRule(*TRI_QUAD_2)
QUAD_NORMS = QuadratureRule(*TRI_QUAD_4)


@dataclass
class FeSpace:
    """Precomputed P1 geometry: areas and shape-function gradients."""
    mesh: Mesh
    areas: np.ndarray          # (Nt,)
    gradients: np.ndarray      # (Nt, 3, 2): grad of hat function of vertex k

    @staticmethod
    def create(mesh: Mesh) -> "FeSpace":
        tri = mesh.triangles
        p = mesh.vertices[tri]                       # (Nt, 3, 2)
        areas = mesh.triangle_areas
        # grad lambda_k = perp(edge opposite k) / (2A), with perp chosen CCW
        g = np.empty((len(tri), 3, 2))
        for k in range(3):
            a = p[:, (k + 1) % 3]
            b = p[:, (k + 2) % 3]
            e = b - a
            g[:, k, 0] = -e[:, 1]
            g[:, k, 1] = e[:, 0]
        g /= (2.0 * areas)[:, None, None]
        return FeSpace(mesh, areas, g)

    @property
    def n_dofs(self) -> int:
        return self.mesh.n_vertices

    def quad_points(self, rule: QuadratureRule = QUAD_ASSEMBLY) -> np.ndarray:
        """Physical quadrature points, shape (Nt, nq, 2)."""
        p = self.mesh.vertices[self.mesh.triangles]
        return np.einsum("qk,tkd->tqd", rule.points, p)


@dataclass
class FeFunction:
    """Coefficient vector on P1 vertex DOFs.

    ``constrained`` marks membership in the zero-trace subspace: all
    boundary-vertex coefficients are forced to zero.
    """
    mesh: Mesh
    coefficients: np.ndarray
    constrained: bool = False

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != (self.mesh.n_vertices,):
            raise ValueError("coefficient length must equal vertex count")
        if self.constrained:
            self.coefficients = self.coefficients.copy()
            self.coefficients[self.mesh.boundary_vertex_flags] = 0.0

    def __call__(self, points) -> np.ndarray:
        return interpolate_at_points(self.mesh, self.coefficients, points)


def _accumulate(space: FeSpace, local: np.ndarray) -> sp.csr_matrix:
    """Sum (Nt, 3, 3) element matrices into a global CSR matrix."""
    tri = space.mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    n = space.n_dofs
    mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n))
    out = mat.tocsr()
    out.sum_duplicates()
    return out


def assemble_mass(space: FeSpace) -> sp.csr_matrix:
    """M_ij = int phi_i phi_j; exact for P1 (diag A/6, off-diag A/12)."""
    base = (np.ones((3, 3)) + np.eye(3)) / 12.0
    local = space.areas[:, None, None] * base[None]
    return _accumulate(space, local)


def assemble_stiffness(space: FeSpace) -> sp.csr_matrix:
    """K_ij = int grad phi_i . grad phi_j (diffusivity factored out)."""
    g = space.gradients
    local = space.areas[:, None, None] * np.einsum("tid,tjd->tij", g, g)
    return _accumulate(space, local)


def assemble_convection(space: FeSpace, field, t: float,
                        rule: QuadratureRule = QUAD_ASSEMBLY) -> sp.csr_matrix:
    """C_ij = int (beta . grad phi_j) phi_i, degree-2 quadrature."""
    xq = space.quad_points(rule)                       # (Nt, nq, 2)
    nt, nq, _ = xq.shape
    beta = field(xq.reshape(-1, 2), t).reshape(nt, nq, 2)
    bg = np.einsum("tqd,tjd->tqj", beta, space.gradients)   # beta . grad phi_j
    phi = rule.points                                   # (nq, 3) = hat values
    local = np.einsum("q,qi,tqj->tij", rule.weights, phi, bg)
    local *= space.areas[:, None, None]
    return _accumulate(space, local)


def face_weight_linf(mesh: Mesh, field, t: float) -> np.ndarray:
    """Per-face surrogate for ||beta . n_F||_{L^inf(F)}.

    Max of |beta . n_F| over 3 Gauss points and the two edge endpoints;
    documented surrogate for the exact sup of an analytic field.
    """
    p0 = mesh.vertices[mesh.face_vertices[:, 0]]
    p1 = mesh.vertices[mesh.face_vertices[:, 1]]
    s = np.concatenate([EDGE_QUAD_3[0], [0.0, 1.0]])
    pts = p0[:, None, :] + s[None, :, None] * (p1 - p0)[:, None, :]
    nf = len(p0)
    beta = field(pts.reshape(-1, 2), t).reshape(nf, len(s), 2)
    dots = np.abs(np.einsum("fsd,fd->fs", beta, mesh.face_normals))
    return dots.max(axis=1)


def assemble_cip(space: FeSpace, field, t: float, gamma: float) -> sp.csr_matrix:
    """Gradient-jump penalty matrix.

    S_ij = gamma * sum over interior faces F of
    h_F^2 w_F <[grad phi_i . n_F], [grad phi_j . n_F]>_F, with
    w_F = face_weight_linf.  P1 gradients are elementwise constant, so
    the face integral is h_F times the constant jump product.  ``field``
    is either the full velocity or its coarse part (weighted variant).
    """
    if gamma < 0:
        raise ValueError("penalty gamma must be >= 0")
    mesh = space.mesh
    n = space.n_dofs
    interior = np.flatnonzero(mesh.interior_face_mask)
    if gamma == 0.0 or len(interior) == 0:
        return sp.csr_matrix((n, n))

    w = face_weight_linf(mesh, field, t)[interior]
    hf = mesh.face_lengths[interior]
    nrm = mesh.face_normals[interior]
    left = mesh.face_left[interior]
    right = mesh.face_right[interior]

    # jump coefficients: [grad u . n] = sum_k u_k (g_left_k - g_right_k) . n
    gl = np.einsum("tkd,td->tk", space.gradients[left], nrm)    # (F, 3)
    gr = np.einsum("tkd,td->tk", space.gradients[right], nrm)
    dofs = np.concatenate([mesh.triangles[left], mesh.triangles[right]], axis=1)
    coef = np.concatenate([gl, -gr], axis=1)                    # (F, 6)

    scale = gamma * hf ** 3 * w                                 # h_F^2 w_F * h_F
    local = scale[:, None, None] * np.einsum("fi,fj->fij", coef, coef)
    rows = np.repeat(dofs, 6, axis=1).ravel()
    cols = np.tile(dofs, (1, 6)).ravel()
    out = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    out.sum_duplicates()
    return out


def assemble_load(space: FeSpace, f, t: float | None = None,
                  rule: QuadratureRule = QUAD_NORMS) -> np.ndarray:
    """b_i = int f phi_i with degree-4 quadrature; f maps (N,2)[,t] -> (N,)."""
    xq = space.quad_points(rule)
    nt, nq, _ = xq.shape
    fx = f(xq.reshape(-1, 2)) if t is None else f(xq.reshape(-1, 2), t)
    fx = np.asarray(fx, dtype=float).reshape(nt, nq)
    phi = rule.points
    b = np.zeros(space.n_dofs)
    contrib = np.einsum("q,tq,qi->ti", rule.weights, fx, phi)
    contrib *= space.areas[:, None]
    np.add.at(b, space.mesh.triangles, contrib)
    return b


def quadrature_l2sq(space: FeSpace, values: np.ndarray,
                    rule: QuadratureRule = QUAD_NORMS) -> float:
    """int g^2 for g given by its values (Nt, nq) at quadrature points."""
    return float(np.einsum("q,tq,t->", rule.weights, values ** 2, space.areas))


class SolverFailure(RuntimeError):
    """Linear solve did not reach the requested residual."""

    def __init__(self, message, x=None, residual=None):
        super().__init__(message)
        self.x = x
        self.residual = residual


def l2_project(space: FeSpace, f, t: float | None = None,
               constrained: bool = False, rtol: float = 1e-12) -> FeFunction:
    """Solve M x = (f, phi_i) for the L2 projection onto V_h (or V_h^0).

    The constrained variant eliminates boundary rows/columns so the
    projection lands in the zero-trace subspace.
    """
    mesh = space.mesh
    M = assemble_mass(space)
    b = assemble_load(space, f, t)
    x = np.zeros(space.n_dofs)
    if constrained:
        idx = mesh.interior_vertex_indices()
        Mi = M[np.ix_(idx, idx)].tocsc()
        xi = spla.spsolve(Mi, b[idx])
        res = np.linalg.norm(Mi @ xi - b[idx]) / max(np.linalg.norm(b[idx]), 1e-300)
        x[idx] = xi
    else:
        x = spla.spsolve(M.tocsc(), b)
        res = np.linalg.norm(M @ x - b) / max(np.linalg.norm(b), 1e-300)
    if not np.isfinite(res) or res > 1e-10:
        raise SolverFailure("mass solve failed", x=x, residual=res)
    return FeFunction(mesh, x, constrained=constrained)


def project_velocity_pw_constant(mesh: Mesh, field, t: float) -> np.ndarray:
    """Elementwise-constant velocity surrogate, shape (Nt, 2).

    Interior triangles carry the mean of the field; triangles with a
    boundary face instead match that face's average normal and
    tangential components (two conditions fixing the constant vector).
    Triangles with several boundary faces use the longest one.
    """
    space = FeSpace.create(mesh)
    xq = space.quad_points(QUAD_ASSEMBLY)
    nt, nq, _ = xq.shape
    beta = field(xq.reshape(-1, 2), t).reshape(nt, nq, 2)
    pib = np.einsum("q,tqd->td", QUAD_ASSEMBLY.weights, beta)

    bmask = mesh.face_right == -1
    bidx = np.flatnonzero(bmask)
    if len(bidx) == 0:
        return pib
    # pick longest boundary face per owning triangle
    order = np.argsort(mesh.face_lengths[bidx])
    best_face = {}
    for f in bidx[order]:
        if mesh.face_lengths[f] <= 0.0:
            raise ValueError("degenerate boundary face")
        best_face[mesh.face_left[f]] = f
    s, wq = EDGE_QUAD_3
    for tri_id, f in best_face.items():
        p0 = mesh.vertices[mesh.face_vertices[f, 0]]
        p1 = mesh.vertices[mesh.face_vertices[f, 1]]
        pts = p0[None] + s[:, None] * (p1 - p0)[None]
        bq = field(pts, t)
        n = mesh.face_normals[f]
        tvec = np.array([-n[1], n[0]])
        avg_n = float(wq @ (bq @ n))
        avg_t = float(wq @ (bq @ tvec))
        pib[tri_id] = avg_n * n + avg_t * tvec
    return pib


def compute_norms(u: FeFunction, mu: float, M=None, K=None, S=None) -> dict:
    """L2 norm, H1 seminorm, and the stabilization quadratic form of u.

    ``triple_contrib`` is the instantaneous integrand mu |grad u|^2 +
    s_h(u, u); its time integration is the solver's job.
    """
    space = FeSpace.create(u.mesh)
    if M is None:
        M = assemble_mass(space)
    if K is None:
        K = assemble_stiffness(space)
    c = u.coefficients
    if M.shape[0] != len(c):
        raise ValueError("matrix/coefficient dimension mismatch")
    l2 = float(np.sqrt(max(c @ (M @ c), 0.0)))
    h1 = float(np.sqrt(max(c @ (K @ c), 0.0)))
    s_val = float(c @ (S @ c)) if S is not None else 0.0
    return {
        "L2": l2,
        "H1_semi": h1,
        "face_jump": float(np.sqrt(max(s_val, 0.0))),
        "triple_contrib": mu * h1 ** 2 + s_val,
    }


def estimate_inverse_constants(space: FeSpace) -> dict:
    """Best constants in the local inverse and trace inequalities.

    c_i: ||grad v||_K <= c_i h_K^{-1} ||v||_K,
    c_t: ||v||_dK <= c_t h_K^{-1/2} ||v||_K,
    via 3x3 generalized eigenproblems per element.
    """
    mesh = space.mesh
    diam = mesh.triangle_diameters
    base = (np.ones((3, 3)) + np.eye(3)) / 12.0
    edge_base = (np.ones((2, 2)) + np.eye(2)) / 6.0
    ci2 = 0.0
    ct2 = 0.0
    p = mesh.vertices[mesh.triangles]
    for e in range(mesh.n_triangles):
        Me = space.areas[e] * base
        Ke = space.areas[e] * space.gradients[e] @ space.gradients[e].T
        lam = eigh(Ke, Me, eigvals_only=True)
        ci2 = max(ci2, diam[e] ** 2 * lam[-1])
        Te = np.zeros((3, 3))
        for k in range(3):
            a, b = (k + 1) % 3, (k + 2) % 3
            ln = np.linalg.norm(p[e, b] - p[e, a])
            Te[np.ix_([a, b], [a, b])] += ln * edge_base
        lam = eigh(Te, Me, eigvals_only=True)
        ct2 = max(ct2, diam[e] * lam[-1])
    return {"c_i": float(np.sqrt(ci2)), "c_t": float(np.sqrt(ct2))}


def export_matrix_market(A, path) -> None:
    """Debug export of a sparse matrix in MatrixMarket coordinate format."""
    from scipy.io import mmwrite
    mmwrite(str(path), A)


# -- point evaluation / mesh transfer -------------------------------------

def interpolate_at_points(mesh: Mesh, coefficients: np.ndarray,
                          points: np.ndarray) -> np.ndarray:
    """Evaluate a P1 function at arbitrary points (exact on nested meshes)."""
    from matplotlib.tri import Triangulation, TrapezoidMapTriFinder

    tr = Triangulation(mesh.vertices[:, 0], mesh.vertices[:, 1],
                       mesh.triangles)
    finder = TrapezoidMapTriFinder(tr)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    tri_id = finder(pts[:, 0], pts[:, 1])
    missed = tri_id < 0
    if np.any(missed):
        # nudge points that fall outside due to roundoff towards the
        # domain interior (barycenter of the mesh)
        center = mesh.vertices.mean(axis=0)
        nudged = pts[missed] + 1e-12 * (center - pts[missed])
        tri_id[missed] = finder(nudged[:, 0], nudged[:, 1])
        if np.any(tri_id < 0):
            raise ValueError("points outside the mesh")
    tri = mesh.triangles[tri_id]
    p0 = mesh.vertices[tri[:, 0]]
    p1 = mesh.vertices[tri[:, 1]]
    p2 = mesh.vertices[tri[:, 2]]
    d = pts - p0
    e1 = p1 - p0
    e2 = p2 - p0
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    l1 = (d[:, 0] * e2[:, 1] - d[:, 1] * e2[:, 0]) / det
    l2 = (e1[:, 0] * d[:, 1] - e1[:, 1] * d[:, 0]) / det
    l0 = 1.0 - l1 - l2
    vals = (coefficients[tri[:, 0]] * l0 + coefficients[tri[:, 1]] * l1
            + coefficients[tri[:, 2]] * l2)
    return vals


def error_l2(mesh: Mesh, coefficients: np.ndarray, exact, t: float | None = None,
             rule: QuadratureRule = QUAD_NORMS) -> float:
    """||u_h - exact||_L2 by elementwise quadrature against the analytic field."""
    space = FeSpace.create(mesh)
    xq = space.quad_points(rule)
    nt, nq, _ = xq.shape
    uh = np.einsum("qk,tk->tq", rule.points, coefficients[mesh.triangles])
    flat = xq.reshape(-1, 2)
    ex = exact(flat) if t is None else exact(flat, t)
    diff = uh - np.asarray(ex, dtype=float).reshape(nt, nq)
    return float(np.sqrt(quadrature_l2sq(space, diff, rule)))
