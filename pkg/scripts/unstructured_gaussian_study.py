#!/usr/bin/env python3
"""Rotating Gaussian on jittered Delaunay discs: mesh-structure study.

On the nested fan meshes of generate_polygonal_disc_mesh the standard
Galerkin method superconverges (fitted L2 rate ~2.1), so the loss of
convergence order that motivates stabilization is invisible there.
This study rebuilds the experiment on unstructured Delaunay meshes of
a jittered hexagonal point set, where Galerkin drops to ~1.7 while
implicitly stabilized CIP stays at ~2.

The explicitly stabilized variant is omitted on purpose: treating the
stabilization term at the old time level is a forward-Euler step for
the stabilization operator and requires tau * rho(M^-1 S) < 2, which
fails on irregular meshes at tau = h for any useful gamma.
"""

import argparse
import math
import sys

import numpy as np
from scipy.spatial import Delaunay

from cipflow import fem
from cipflow.harness import RateTable, compute_rates, gaussian_bump
from cipflow.mesh import Mesh
from cipflow.solver import ProblemSetup, run_forward
from cipflow.velocity import rigid_rotation


def jittered_delaunay_disc(h, seed=0, jitter=0.25):
    """Unit-disc Delaunay mesh of a jittered hexagonal lattice."""
    rng = np.random.default_rng(seed)
    m = int(round(2.0 * math.pi / h))
    th = np.linspace(0.0, 2.0 * math.pi, m, endpoint=False)
    pts = [np.column_stack([np.cos(th), np.sin(th)])]
    dy = h * math.sqrt(3.0) / 2.0
    ny = int(2.2 / dy) + 2
    for j in range(-ny, ny + 1):
        y = j * dy
        xs = np.arange(-1.2, 1.2, h) + (0.5 * h if j % 2 else 0.0)
        row = np.column_stack([xs, np.full(len(xs), y)])
        row += rng.uniform(-jitter * h, jitter * h, row.shape)
        keep = np.linalg.norm(row, axis=1) < 1.0 - 0.55 * h
        pts.append(row[keep])
    v = np.vstack(pts)
    return Mesh.build(v, Delaunay(v).simplices)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--gamma", type=float, default=0.025)
    ap.add_argument("--seed", type=int, default=2)
    args = ap.parse_args()

    u0 = gaussian_bump((0.3, 0.0), 0.2)
    field = rigid_rotation((0.0, 0.0))
    T = 2.0 * math.pi
    tables = {"galerkin": RateTable(quantity="L2_error_galerkin"),
              "cip_implicit": RateTable(quantity="L2_error_cip")}
    for k in range(4):
        h = 0.17 / 2 ** k
        mesh = jittered_delaunay_disc(h, seed=args.seed + k)
        n = max(int(round(T / mesh.h_max)), 1)
        tau = T / n
        for name, method, gamma in (("galerkin", "galerkin", 0.0),
                                    ("cip_implicit", "cip", args.gamma)):
            setup = ProblemSetup(mesh=mesh, mu=1e-6, field=field, T=T,
                                 u0=u0, gamma=gamma, method=method)
            traj = run_forward(setup, tau, stride=n)
            err = fem.error_l2(mesh, traj.snapshots[-1], u0)
            tables[name].add(mesh.h_max, tau, err)
    for name, table in tables.items():
        rates = compute_rates(table)
        print(f"{name}: fitted rate {rates['slope']:.3f}  "
              f"errors {[f'{v:.3e}' for v in table.values]}")
    gap = (compute_rates(tables["cip_implicit"])["slope"]
           - compute_rates(tables["galerkin"])["slope"])
    print(f"rate gap (cip - galerkin) = {gap:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
