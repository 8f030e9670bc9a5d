"""End-to-end acceptance suite.

Each test covers one advertised capability and prints a single
[PASS]/[FAIL] line with the measured numbers, then asserts the stated
tolerance.  Heavy experiment sweeps are shared through session fixtures.
"""
import math

import numpy as np
import pytest

from cipflow import fem
from cipflow.fem import (FeFunction, FeSpace, assemble_cip,
                         assemble_convection, assemble_mass,
                         estimate_inverse_constants, l2_project,
                         project_velocity_pw_constant)
from cipflow.filtering import (FilterConfig, discrete_duality_gap,
                               filtered_norm, helmholtz_filter)
from cipflow.harness import (ExperimentConfig, RateTable, compute_rates,
                             gaussian_bump, run_drop_beta_prime,
                             run_rotating_gaussian, run_rough_data)
from cipflow.mesh import (generate_polygonal_disc_mesh,
                          generate_unit_square_mesh)
from cipflow.solver import (ProblemSetup, SchemeOperators, run_forward,
                            stability_report)
from cipflow.velocity import (VelocityField, composite, compute_sigma_p_lambda,
                              compute_tau_F, multiscale_square,
                              oscillatory_fine, rigid_rotation, shear,
                              sigma_p_samples)


def report(criterion, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
    return ok


# -- shared heavy runs --------------------------------------------------------

@pytest.fixture(scope="session")
def figure1_tables():
    cfg = ExperimentConfig(
        domain="disc", levels=[2, 3, 4, 5], mu=1e-6, gamma=0.005,
        T=2.0 * math.pi, tau_rule="tau_equals_h", u0_kind="gaussian",
        u0_params={"sigma": 0.2, "x0": [0.3, 0.0]},
        methods=["galerkin", "cip_implicit", "cip_explicit"])
    return run_rotating_gaussian(cfg)


@pytest.fixture(scope="session")
def rough_suite():
    cfg = ExperimentConfig(
        domain="square", levels=[16, 32, 64], mu=1e-6, gamma=0.01,
        h_frak=0.01, T=0.5, tau_rule="tau_equals_h",
        u0_kind="checkerboard", u0_params={"k": 10}, ref_refines=2)
    return cfg, run_rough_data(cfg)


# -- criteria -----------------------------------------------------------------

def test_criterion_01_rotating_gaussian_rates_cip(figure1_tables):
    rates = {name: compute_rates(t)["slope"]
             for name, t in figure1_tables.items()}
    ok = rates["cip_implicit"] >= 1.8 and rates["cip_explicit"] >= 1.8
    assert report(
        "criterion 1a (figure-style convergence, CIP rate >= 1.8)", ok,
        f"cip_implicit = {rates['cip_implicit']:.3f}, "
        f"cip_explicit = {rates['cip_explicit']:.3f}")


def test_criterion_01_rotating_gaussian_galerkin_separation(figure1_tables):
    # On this structured disc family the standard Galerkin method
    # superconverges (the red-refined fan mesh is locally translation
    # invariant), so the expected rate separation does not appear; it
    # does on irregular meshes, where the explicitly stabilized variant
    # is however not time-step stable at tau = h.  See
    # scripts/unstructured_gaussian_study.py for the separated setting.
    rates = {name: compute_rates(t)["slope"]
             for name, t in figure1_tables.items()}
    gap = rates["cip_implicit"] - rates["galerkin"]
    ok = gap >= 0.3
    report("criterion 1b (Galerkin rate <= CIP rate - 0.3)", ok,
           f"galerkin = {rates['galerkin']:.3f}, "
           f"cip_implicit = {rates['cip_implicit']:.3f}, gap = {gap:.3f}")
    assert ok, ("no rate separation on the structured disc family: "
                f"galerkin = {rates['galerkin']:.3f} also converges at "
                "second order here")


def test_criterion_02_smooth_high_peclet_sup_rate():
    u0 = gaussian_bump((0.3, 0.0), 0.1)
    field = rigid_rotation((0.0, 0.0))
    T = 2.0 * math.pi
    table = RateTable(quantity="linf_l2")
    for level in (2, 3, 4, 5):
        mesh = generate_polygonal_disc_mesh(6, level)
        h = mesh.h_max
        n = max(int(round(T / (h / 8.0))), 1)
        tau = T / n
        setup = ProblemSetup(mesh=mesh, mu=1e-6, field=field, T=T, u0=u0,
                             gamma=0.01, method="cip")
        traj = run_forward(setup, tau, stride=max(n // 16, 1))
        errs = []
        for t, snap in zip(traj.snapshot_times, traj.snapshots):
            c, s = math.cos(t), math.sin(t)

            def ex(x, c=c, s=s):
                x = np.atleast_2d(x)
                back = np.column_stack([c * x[:, 0] + s * x[:, 1],
                                        -s * x[:, 0] + c * x[:, 1]])
                return u0(back)

            errs.append(fem.error_l2(mesh, snap, ex))
        table.add(h, tau, max(errs))
    slope = compute_rates(table)["slope"]
    ok = 1.3 <= slope <= 1.9
    assert report("criterion 2 (sup-in-time L2 rate in [1.3, 1.9])", ok,
                  f"slope = {slope:.3f}")


def test_criterion_03_filter_exactness():
    def mode(x):
        x = np.atleast_2d(x)
        return np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])

    s = 0.01
    damp = 1.0 / (1.0 + 2.0 * math.pi ** 2 * s)
    errs, hs = [], []
    rel64 = None
    for n in (16, 32, 64):
        mesh = generate_unit_square_mesh(n)
        space = FeSpace.create(mesh)
        e = l2_project(space, mode, constrained=True)
        out = helmholtz_filter(e, FilterConfig(h_frak=s))
        exact = damp * mode(mesh.vertices)
        M = assemble_mass(space)
        d = out.coefficients - exact
        err = math.sqrt(d @ (M @ d))
        errs.append(err)
        hs.append(mesh.h_max)
        if n == 64:
            rel64 = err / math.sqrt(exact @ (M @ exact))
    rate = float(np.polyfit(np.log(hs), np.log(errs), 1)[0])
    ok = rel64 < 0.01 and rate >= 1.8
    assert report("criterion 3 (filter eigenmode 1% at n=64, rate >= 1.8)",
                  ok, f"rel. error = {rel64:.2e}, rate = {rate:.3f}")


def test_criterion_04_norm_identity():
    mesh = generate_unit_square_mesh(32)
    cfg = FilterConfig(h_frak=0.01)
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(20):
        e = FeFunction(mesh, rng.standard_normal(mesh.n_vertices),
                       constrained=True)
        out = helmholtz_filter(e, cfg)
        worst = max(worst, filtered_norm(out, e, cfg)["identity_residual"])
    ok = worst <= 1e-10
    assert report("criterion 4 (norm identity on 20 random fields)", ok,
                  f"max residual = {worst:.2e}")


def test_criterion_05_discrete_duality_everywhere():
    def u0(x):
        x = np.atleast_2d(x)
        return np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])

    def f(x, t):
        return np.cos(2.0 * t) * np.atleast_2d(x)[:, 0]

    square = generate_unit_square_mesh(8)
    disc = generate_polygonal_disc_mesh(6, 2)
    gaussian = gaussian_bump((0.3, 0.0), 0.2)
    setups = []
    for integ in ("cn_implicit_stab", "cn_explicit_stab", "backward_euler"):
        for src in (None, f):
            setups.append((ProblemSetup(
                mesh=square, mu=1e-2, field=multiscale_square(1e-2),
                T=0.2, u0=u0, f=src, gamma=0.01, method="cip"), integ))
            setups.append((ProblemSetup(
                mesh=square, mu=1e-2, field=shear(), T=0.2, u0=u0, f=src,
                gamma=0.0, method="galerkin"), integ))
            setups.append((ProblemSetup(
                mesh=disc, mu=1e-4, field=rigid_rotation((0.0, 0.0)),
                T=0.2, u0=gaussian, f=src, gamma=0.02, method="cip",
                weight_field="coarse_only"), integ))
    worst = max(discrete_duality_gap(s, tau=0.02, integrator=integ)["rel_gap"]
                for s, integ in setups)
    ok = worst <= 1e-10
    assert report(
        f"criterion 5 (discrete duality on {len(setups)} setups)", ok,
        f"max rel_gap = {worst:.2e}")


def test_criterion_06_rough_data_filtered_rate(rough_suite):
    _, res = rough_suite
    rates = compute_rates(res["measured"])
    slope = rates["slope"]
    ok = 0.4 <= slope <= 1.2 and res["flags"] == []
    assert report("criterion 6 (rough-data filtered-error rate in [0.4, 1.2])",
                  ok, f"slope = {slope:.3f}, "
                  f"values = {[f'{v:.3e}' for v in res['measured'].values]}")


def test_criterion_07_a_posteriori_upper_bound(rough_suite):
    _, res = rough_suite
    upper = all(r.total_estimate >= r.measured_filtered_error
                for r in res["reports"])
    effs = [r.effectivity for r in res["reports"]]
    jumps = [effs[i + 1] / effs[i] for i in range(len(effs) - 1)]
    bounded = all(max(j, 1.0 / j) <= 10.0 for j in jumps)
    ok = upper and bounded
    assert report("criterion 7 (estimate >= measured, effectivity bounded)",
                  ok, f"effectivities = {[f'{e:.1f}' for e in effs]}")


def test_criterion_08_dropped_fine_scale(rough_suite):
    cfg, res = rough_suite
    out = run_drop_beta_prime(cfg, references=res["references"])
    ok = all(r <= 2.0 for r in out["ratios"])
    assert report("criterion 8 (coarse-only error within 2x of full)", ok,
                  f"ratios = {[f'{r:.3f}' for r in out['ratios']]}")


def test_criterion_09_stability_robust_in_mu():
    mesh = generate_unit_square_mesh(32)
    from cipflow.harness import checkerboard
    u0 = checkerboard(k=10)
    ratios = {}
    for mu in (1e-2, 1e-4, 1e-6, 1e-8):
        setup = ProblemSetup(mesh=mesh, mu=mu, field=multiscale_square(mu),
                             T=0.5, u0=u0, gamma=0.01, method="cip")
        traj = run_forward(setup, tau=0.5 / 32)
        ratios[mu] = stability_report(traj, setup)["ratio"]
    ok = all(r <= 10.0 for r in ratios.values())
    assert report("criterion 9 (stability ratio <= 10 over 6 decades of mu)",
                  ok, "ratios = " + ", ".join(f"{mu:g}: {r:.3f}"
                                              for mu, r in ratios.items()))


def test_criterion_10_timescale_formulas():
    mu = 1e-2
    pts = np.random.default_rng(11).uniform(0.05, 0.95, (50, 2))
    sig_rot = np.abs(sigma_p_samples(rigid_rotation((0.0, 0.0)), mu,
                                     pts, 0.0)).max()
    sig_shear = np.abs(sigma_p_samples(shear(), mu, pts, 0.0) - 0.5).max()
    fine = oscillatory_fine(0.3, 2.0)
    expected = 0.5 * np.sum(fine.fine(pts, 0.0) ** 2, axis=1) / mu
    sig_fine = np.abs(sigma_p_samples(fine, mu, pts, 0.0) - expected).max()
    analytic_ok = max(sig_rot, sig_shear, sig_fine) <= 1e-8

    mesh = generate_unit_square_mesh(16)
    library = [rigid_rotation((0.5, 0.5)), shear(), oscillatory_fine(0.1, 4.0),
               multiscale_square(mu), composite(shear(),
                                                oscillatory_fine(0.1, 4.0))]
    readings = []
    comparison_ok = True
    for field in library:
        lit, mx = compute_tau_F(field, mu, [0.0], mesh=mesh)
        tilde = compute_sigma_p_lambda(field, mu, mesh)
        readings.append(f"{field.name}: literal={lit:.3g} max={mx:.3g} "
                        f"tilde={tilde:.3g}")
        if math.isfinite(tilde) and not (mx <= 3.0 * tilde + 1e-12):
            comparison_ok = False
    ok = analytic_ok and comparison_ok
    assert report("criterion 10 (timescale formulas and 3x comparison)", ok,
                  f"max analytic dev = "
                  f"{max(sig_rot, sig_shear, sig_fine):.2e}; "
                  + "; ".join(readings))


def test_criterion_11_property_suite():
    checks = {}

    # convection skew-symmetry residual decays O(h) on the disc
    rng = np.random.default_rng(0)
    field = rigid_rotation((0.0, 0.0))
    residuals, hs = [], []
    for level in (1, 2, 3, 4):
        mesh = generate_polygonal_disc_mesh(6, level)
        space = FeSpace.create(mesh)
        A = (lambda C: (C + C.T).toarray())(
            assemble_convection(space, field, 0.0))
        idx = mesh.interior_vertex_indices()
        worst = 0.0
        for _ in range(5):
            v = np.zeros(space.n_dofs)
            v[idx] = rng.standard_normal(len(idx))
            worst = max(worst, abs(v @ (A @ v)) / (v @ v))
        residuals.append(worst)
        hs.append(mesh.h_max)
    rate = float(np.polyfit(np.log(hs), np.log(residuals), 1)[0])
    checks["skew_decay"] = rate > 0.8

    # CIP annihilates affine functions
    mesh = generate_unit_square_mesh(8)
    space = FeSpace.create(mesh)
    S = assemble_cip(space, shear(), 0.0, gamma=0.7)
    v = 1.0 + 2.0 * mesh.vertices[:, 0] - 3.0 * mesh.vertices[:, 1]
    checks["affine"] = abs(v @ (S @ v)) < 1e-10

    # gamma = 0 reduces the stabilized step matrices to Galerkin bitwise
    def mk(**kw):
        return ProblemSetup(mesh=mesh, mu=1e-2, field=shear(), T=0.1,
                            u0=None, **kw)

    a = SchemeOperators(mk(method="cip", gamma=0.0), 0.05,
                        "cn_implicit_stab").step_matrices(0)
    b = SchemeOperators(mk(method="galerkin"), 0.05,
                        "cn_implicit_stab").step_matrices(0)
    checks["gamma0"] = all((x != y).nnz == 0 for x, y in zip(a, b))

    # elementwise-constant velocity surrogate approximation constant
    worst = 0.0
    rot = rigid_rotation((0.5, 0.5))
    for n in (8, 16, 32):
        m = generate_unit_square_mesh(n)
        pc = project_velocity_pw_constant(m, rot, 0.0)
        vv = rot(m.vertices, 0.0)
        err = np.linalg.norm(vv[m.triangles] - pc[:, None, :], axis=2)
        worst = max(worst, err.max() / m.triangle_diameters.max())
    checks["pi0_beta"] = worst < 5.0

    # inverse constants identical on congruent mesh families
    vals = [estimate_inverse_constants(
        FeSpace.create(generate_unit_square_mesh(n))) for n in (2, 4, 8)]
    checks["inverse_const"] = all(
        abs(v[k] - vals[0][k]) < 1e-10 for v in vals for k in ("c_i", "c_t"))

    ok = all(checks.values())
    assert report("criterion 11 (structural property suite)", ok,
                  ", ".join(f"{k}={'ok' if v else 'FAIL'}"
                            for k, v in checks.items()))
