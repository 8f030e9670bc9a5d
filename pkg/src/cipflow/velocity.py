"""Multiscale velocity fields: coarse transport plus fine mixing.

A field is stored as the explicit decomposition beta = coarse + fine.
Structural checks (divergence-free, non-penetration, fine-scale
amplitude vs diffusivity) are sampled, never assumed; the flow
timescales controlling the exponential constant in the robustness
estimates are computed in both documented readings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from .mesh import Mesh


def _zero(x, t):
    return np.zeros_like(np.atleast_2d(x), dtype=float)


def _fd_jacobian(fn, x, t, step):
    """Central-difference Jacobian, shape (N, 2, 2): J[i,j] = d beta_i / d x_j."""
    x = np.atleast_2d(x)
    jac = np.empty((len(x), 2, 2))
    for j in range(2):
        dx = np.zeros(2)
        dx[j] = step
        jac[:, :, j] = (fn(x + dx, t) - fn(x - dx, t)) / (2.0 * step)
    return jac


@dataclass
class VelocityField:
    """Time-dependent field beta(x, t) = coarse(x, t) + fine(x, t).

    The callables are vectorized: (N, 2) points -> (N, 2) vectors.
    Jacobians are analytic when provided, otherwise finite differences.
    ``time_dependent=False`` lets solvers reuse assembled matrices.
    """
    coarse: Callable = _zero
    fine: Callable = _zero
    coarse_jac: Callable | None = None
    fine_jac: Callable | None = None
    time_dependent: bool = False
    name: str = "custom"
    fd_step: float = 1e-6

    def __call__(self, x, t):
        x = np.atleast_2d(x)
        return self.coarse(x, t) + self.fine(x, t)

    def jac_coarse(self, x, t):
        if self.coarse_jac is not None:
            return self.coarse_jac(np.atleast_2d(x), t)
        return _fd_jacobian(self.coarse, x, t, self.fd_step)

    def jac_full(self, x, t):
        jc = self.jac_coarse(x, t)
        if self.fine is _zero:
            return jc
        if self.fine_jac is not None:
            return jc + self.fine_jac(np.atleast_2d(x), t)
        return jc + _fd_jacobian(self.fine, x, t, self.fd_step)

    def coarse_only(self) -> "VelocityField":
        """Same field with the fine scale dropped (degenerate-data runs)."""
        return VelocityField(coarse=self.coarse, coarse_jac=self.coarse_jac,
                             time_dependent=self.time_dependent,
                             name=self.name + "_coarse_only",
                             fd_step=self.fd_step)


def evaluate_decomposed(field: VelocityField, x, t):
    """Return (coarse, fine, total) evaluations; total is their exact sum."""
    x = np.atleast_2d(x)
    bc = field.coarse(x, t)
    bf = field.fine(x, t)
    return bc, bf, bc + bf


@dataclass
class ScaleSeparationReport:
    Pe_L: float
    Pe_h: float
    tau_F_literal: float
    tau_F_max: float
    tilde_tau_F: float
    fine_ratio: float
    violations: list = dc_field(default_factory=list)


# -- built-in field library ----------------------------------------------

def rigid_rotation(center=(0.0, 0.0)) -> VelocityField:
    """Solid-body rotation about ``center``: beta = (-(y-cy), x-cx)."""
    cx, cy = center

    def coarse(x, t):
        return np.column_stack([-(x[:, 1] - cy), x[:, 0] - cx])

    def jac(x, t):
        j = np.zeros((len(x), 2, 2))
        j[:, 0, 1] = -1.0
        j[:, 1, 0] = 1.0
        return j

    return VelocityField(coarse=coarse, coarse_jac=jac, name="rigid_rotation")


def shear() -> VelocityField:
    """Simple shear beta = (y, 0)."""

    def coarse(x, t):
        return np.column_stack([x[:, 1], np.zeros(len(x))])

    def jac(x, t):
        j = np.zeros((len(x), 2, 2))
        j[:, 0, 1] = 1.0
        return j

    return VelocityField(coarse=coarse, coarse_jac=jac, name="shear")


def oscillatory_fine(eps: float, kappa: float) -> VelocityField:
    """Divergence-free oscillation beta' = eps (sin(2 pi k y), sin(2 pi k x))."""
    w = 2.0 * np.pi * kappa

    def fine(x, t):
        return eps * np.column_stack([np.sin(w * x[:, 1]), np.sin(w * x[:, 0])])

    def jac(x, t):
        j = np.zeros((len(x), 2, 2))
        j[:, 0, 1] = eps * w * np.cos(w * x[:, 1])
        j[:, 1, 0] = eps * w * np.cos(w * x[:, 0])
        return j

    return VelocityField(fine=fine, fine_jac=jac,
                         name=f"oscillatory_fine({eps},{kappa})")


def composite(coarse_field: VelocityField, fine_field: VelocityField) -> VelocityField:
    """Coarse part of one field combined with the fine part of another."""
    return VelocityField(
        coarse=coarse_field.coarse, coarse_jac=coarse_field.coarse_jac,
        fine=fine_field.fine, fine_jac=fine_field.fine_jac,
        time_dependent=coarse_field.time_dependent or fine_field.time_dependent,
        name=f"composite({coarse_field.name},{fine_field.name})")


def multiscale_square(mu: float, kappa: float = 8.0, amp: float | None = None,
                      center=(0.5, 0.5)) -> VelocityField:
    """Default multiscale field on the unit square.

    Rotation about the domain center plus a fine oscillation of
    amplitude sqrt(mu) (so ||beta'||^2 ~ mu), modulated by the smooth
    bump 16 x(1-x) y(1-y) vanishing on the boundary, keeping
    beta . n = coarse . n there.
    """
    if amp is None:
        amp = math.sqrt(mu)
    rot = rigid_rotation(center)
    w = 2.0 * np.pi * kappa

    def chi(x):
        return 16.0 * x[:, 0] * (1.0 - x[:, 0]) * x[:, 1] * (1.0 - x[:, 1])

    def fine(x, t):
        c = chi(x)
        return amp * np.column_stack([c * np.sin(w * x[:, 1]),
                                      c * np.sin(w * x[:, 0])])

    return VelocityField(coarse=rot.coarse, coarse_jac=rot.coarse_jac,
                         fine=fine, name=f"multiscale_square(mu={mu},kappa={kappa})")


FIELD_LIBRARY = {
    "rigid_rotation": rigid_rotation,
    "shear": shear,
    "oscillatory_fine": oscillatory_fine,
    "composite": composite,
    "multiscale_square": multiscale_square,
}


# -- sampled norms and structural checks -----------------------------------

def _sample_points(mesh: Mesh) -> np.ndarray:
    return np.vstack([mesh.vertices, mesh.centroids()])


def sampled_sup_speed(field: VelocityField, points, times) -> float:
    return max(float(np.linalg.norm(field(points, t), axis=1).max())
               for t in times)


def sampled_w1inf_coarse(field: VelocityField, points, times) -> float:
    """Surrogate for ||coarse||_{W^{1,inf}}: max of speed and Jacobian 2-norm."""
    out = 0.0
    for t in times:
        speed = np.linalg.norm(field.coarse(np.atleast_2d(points), t), axis=1).max()
        jac = field.jac_coarse(points, t)
        jn = np.linalg.norm(jac, ord=2, axis=(1, 2)).max()
        out = max(out, float(speed), float(jn))
    return out


def sampled_linf_fine(field: VelocityField, points, times) -> float:
    return max(float(np.linalg.norm(field.fine(np.atleast_2d(points), t), axis=1).max())
               for t in times)


def check_assumptions(field: VelocityField, mesh: Mesh, mu: float,
                      times=(0.0,), div_tol: float = 1e-8,
                      bc_tol: float = 1e-8) -> ScaleSeparationReport:
    """Report-only verification of the structural assumptions.

    Samples max |div beta|, max boundary |coarse . n| and the ratio
    ||beta'||_inf^2 / mu, flagging the latter outside [0.1, 10].
    """
    pts = _sample_points(mesh)
    violations = []

    max_div = 0.0
    for t in times:
        jac = field.jac_full(pts, t)
        max_div = max(max_div, float(np.abs(jac[:, 0, 0] + jac[:, 1, 1]).max()))
    if max_div > div_tol:
        violations.append(f"divergence residual {max_div:.3e} > {div_tol:.1e}")

    bmask = ~mesh.interior_face_mask
    p0 = mesh.vertices[mesh.face_vertices[bmask, 0]]
    p1 = mesh.vertices[mesh.face_vertices[bmask, 1]]
    mid = 0.5 * (p0 + p1)
    normals = mesh.face_normals[bmask]
    max_bn = 0.0
    for t in times:
        bc = field.coarse(mid, t)
        max_bn = max(max_bn, float(np.abs(np.einsum("fd,fd->f", bc, normals)).max()))
    if max_bn > bc_tol:
        violations.append(f"boundary penetration |coarse.n| {max_bn:.3e} > {bc_tol:.1e}")

    linf_fine = sampled_linf_fine(field, pts, times)
    ratio = linf_fine ** 2 / mu
    if linf_fine > 0.0 and not (0.1 <= ratio <= 10.0):
        violations.append(f"fine-scale ratio ||beta'||^2/mu = {ratio:.3e} outside [0.1, 10]")

    pe_l, pe_h = compute_peclet(field, mu, 1.0, mesh.h_max, points=pts, times=times)
    tau_lit, tau_max = compute_tau_F(field, mu, times, points=pts)
    tilde = compute_sigma_p_lambda(field, mu, mesh, times)
    return ScaleSeparationReport(Pe_L=pe_l, Pe_h=pe_h, tau_F_literal=tau_lit,
                                 tau_F_max=tau_max, tilde_tau_F=tilde,
                                 fine_ratio=ratio, violations=violations)


def compute_peclet(field: VelocityField, mu: float, L: float, h: float,
                   points=None, times=(0.0,)) -> tuple[float, float]:
    """Pe_L = U L / mu and Pe_h = U h / mu with U the sampled sup speed."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    if points is None:
        g = np.linspace(0.0, 1.0, 21)
        xx, yy = np.meshgrid(g, g)
        points = np.column_stack([xx.ravel(), yy.ravel()])
    u = sampled_sup_speed(field, points, times)
    return u * L / mu, u * h / mu


def compute_tau_F(field: VelocityField, mu: float, times,
                  points=None, mesh: Mesh | None = None) -> tuple[float, float]:
    """Both readings of the flow timescale.

    Literal:  1/tau_F = 1/2 sup_t min(||coarse||_{W1,inf}^{-1}, ||fine||_inf^2/mu).
    Max:      1/tau_F = 1/2 sup_t max(||coarse||_{W1,inf},      ||fine||_inf^2/mu).
    The literal reading returns +inf when the fine scale vanishes; the
    max reading is the conservative default used in C_T.
    """
    if points is None:
        if mesh is not None:
            points = _sample_points(mesh)
        else:
            g = np.linspace(0.0, 1.0, 21)
            xx, yy = np.meshgrid(g, g)
            points = np.column_stack([xx.ravel(), yy.ravel()])
    inv_lit = 0.0
    inv_max = 0.0
    for t in times:
        w1 = sampled_w1inf_coarse(field, points, [t])
        fin = sampled_linf_fine(field, points, [t]) ** 2 / mu
        w1_inv = 1.0 / w1 if w1 > 0 else math.inf
        inv_lit = max(inv_lit, 0.5 * min(w1_inv, fin))
        inv_max = max(inv_max, 0.5 * max(w1, fin))
    tau_lit = 1.0 / inv_lit if inv_lit > 0 else math.inf
    tau_max = 1.0 / inv_max if inv_max > 0 else math.inf
    return tau_lit, tau_max


def sigma_p_samples(field: VelocityField, mu: float, points, t: float) -> np.ndarray:
    """Largest eigenvalue of the symmetric 2x2 stability matrix per point.

    Lambda = sym(grad coarse) - (div coarse / 2) I + (|fine|^2 / (2 mu)) I;
    closed-form eigenvalues of the symmetric 2x2 matrix.
    """
    jac = field.jac_coarse(points, t)
    sym = 0.5 * (jac + np.transpose(jac, (0, 2, 1)))
    div = jac[:, 0, 0] + jac[:, 1, 1]
    fine = field.fine(np.atleast_2d(points), t)
    iso = 0.5 * np.einsum("nd,nd->n", fine, fine) / mu - 0.5 * div
    a = sym[:, 0, 0] + iso
    b = sym[:, 0, 1]
    c = sym[:, 1, 1] + iso
    half_tr = 0.5 * (a + c)
    rad = np.sqrt(np.maximum((0.5 * (a - c)) ** 2 + b ** 2, 0.0))
    return half_tr + rad


def compute_sigma_p_lambda(field: VelocityField, mu: float, mesh: Mesh,
                           times=(0.0,)) -> float:
    """tilde_tau_F from the largest positive eigenvalue over centroids/times.

    The decomposition is taken as given; no optimization over
    admissible coarse parts is attempted.
    """
    pts = mesh.centroids()
    inv = 0.0
    for t in times:
        sig = sigma_p_samples(field, mu, pts, t)
        inv = max(inv, 0.5 * float(np.maximum(sig, 0.0).max()))
    return 1.0 / inv if inv > 0 else math.inf
