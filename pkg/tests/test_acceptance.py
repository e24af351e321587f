"""Acceptance criteria A1 to A8.

Each test prints one ``A<k> PASS`` or ``A<k> FAIL`` line with the measured
numbers before asserting, so the summary (``pytest -rA``) doubles as a report.
"""
import json
from pathlib import Path

import numpy as np
import pytest

from topograd.adjoint import crank_nicolson, solve_adjoint
from topograd.fem import ConductivityField, assemble_mass, assemble_stiffness
from topograd.forward import StepperOptions, TimeGrid, solve_background
from topograd.inclusion import InclusionSpec, classify_elements
from topograd.ionic import IonicParams
from topograd.mesh import generate_box, mesh_from_arrays
from topograd.reconstruction import asymptotics_study, cost_J, interpolate, reconstruct
from topograd.scenario_io import (clean_trace, default_scenario, load_scenario,
                                  measurements_from_trace, report_to_json, run_reconstruction,
                                  source_builder, synthesize_measurements)

from conftest import REF_TET

GOLDEN = Path(__file__).resolve().parents[1] / "scenarios" / "desk_ventricle.ini"
P = IonicParams()


def verdict(tag, ok, detail):
    print(f"{tag} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"{tag}: {detail}"


def box_scenario(n, T, N, **extra):
    """Unit box, scalar conductivity, slab stimulus, all of the boundary measured."""
    opts = dict(mesh__generator="box", mesh__cells=f"{n},{n},{n}", conductivity__model="scalar",
                stimulus__kind="slab", stimulus__width=0.1, time__T=T, time__N=N,
                measurement__gamma="all", measurement__refine=False,
                measurement__allow_inverse_crime=True)
    return default_scenario(**{**opts, **extra})


# ---------------------------------------------------------------- A1

def test_A1_fem_verification():
    tet = mesh_from_arrays(REF_TET, [[0, 1, 2, 3]])
    M = assemble_mass(tet).toarray()
    A = assemble_stiffness(tet, 1.0).toarray()
    M_ref = (np.ones((4, 4)) + np.eye(4)) / 120
    A_ref = np.array([[3, -1, -1, -1], [-1, 1, 0, 0], [-1, 0, 1, 0], [-1, 0, 0, 1]]) / 6
    local_err = max(np.abs(M - M_ref).max(), np.abs(A - A_ref).max())

    # u = (1 + t) cos(pi x) cos(pi y) cos(pi z); backward Euler is exact in t for it
    T, errors, ns = 0.1, [], (12, 18, 24)
    for n in ns:
        m = generate_box(n, n, n)
        phi = np.prod(np.cos(np.pi * m.vertices), axis=1)
        Mc = assemble_mass(m)
        src = lambda t: Mc @ (phi * (1.0 + 3 * np.pi ** 2 * (1.0 + t)))
        u = solve_background(m, ConductivityField.scalar(m, 1.0), None, phi, TimeGrid(T, 2),
                             StepperOptions(lumped=False), source=src)
        e = u.final - (1 + T) * phi
        errors.append(np.sqrt(e @ (Mc @ e)))
    orders = np.diff(np.log(errors)) / np.diff(np.log(1.0 / np.array(ns)))
    verdict("A1", local_err <= 1e-12 and orders.min() >= 1.9,
            f"local matrix error {local_err:.2e}, L2 orders {np.round(orders, 3).tolist()}")


# ---------------------------------------------------------------- A2

def test_A2_maximum_principle():
    lo, hi = P.u1 - 1e-8, P.u3 + 1e-8
    worst = []
    desk = load_scenario(GOLDEN)
    box = box_scenario(10, 30.0, 150, inclusion__enabled=True,
                       inclusion__center="0.5, 0.5, 0.5", inclusion__eps=0.2)
    for sc in (desk, box):
        for monotone in ("false", "true"):
            s = sc.with_overrides({"solver.monotone": monotone})
            setup = s.forward_setup()
            for u in (setup.background(), setup.perturbed(s.inclusion())):
                worst.append((float(u.frames.min()), float(u.frames.max())))
    umin, umax = min(w[0] for w in worst), max(w[1] for w in worst)
    verdict("A2", umin >= lo and umax <= hi,
            f"{len(worst)} solves, u in [{umin:.3g}, {umax:.3g}]")


# ---------------------------------------------------------------- A3

def test_A3_asymptotic_rates():
    k1 = 0.9
    sc = box_scenario(20, 5.0, 200, inclusion__enabled=True, inclusion__center="0.5, 0.5, 0.5",
                      inclusion__k1=k1)
    mesh = sc.build_mesh()
    setup = sc.forward_setup(mesh)
    meas = synthesize_measurements(sc, mesh, InclusionSpec((0.7, 0.6, 0.35), 0.15, k1))
    h_ref = 1.0
    eps = [f * h_ref for f in (0.4, 0.28, 0.2, 0.14)]
    tab = asymptotics_study(setup, source_builder(mesh, setup.gamma, meas), (0.5, 0.5, 0.5), eps, k1)
    dev = [abs(r.ratio - 1.0) for r in tab.rows]
    ok = (tab.slopes["l2_h1"] >= 0.45 and tab.slopes["l2_l2"] >= 0.55 and dev[-1] <= 0.20
          and all(b < a for a, b in zip(dev, dev[1:])))
    verdict("A3", ok, f"slopes H1 {tab.slopes['l2_h1']:.3f} L2 {tab.slopes['l2_l2']:.3f}, "
                      f"ratios {[round(r.ratio, 4) for r in tab.rows]}")


# ---------------------------------------------------------------- A4

def test_A4_gradient_oracle():
    sc = box_scenario(16, 5.0, 50)
    mesh = sc.build_mesh()
    setup = sc.forward_setup(mesh)
    meas = synthesize_measurements(sc, mesh, InclusionSpec((0.7, 0.6, 0.35), 0.3, 0.1))
    sb = source_builder(mesh, setup.gamma, meas)
    u = setup.background()
    rep = reconstruct(setup, sb, 0.1, background=u)
    rel = []
    for z in ((0.3, 0.5, 0.5), (0.5, 0.35, 0.6), (0.45, 0.6, 0.4)):
        inc = InclusionSpec(z, 0.1, 0.1)
        el = classify_elements(mesh, inc)
        fd = (cost_J(sb(setup.perturbed(inc, el))) - rep.J) / el.volume
        g = interpolate(mesh, rep.G, z)
        rel.append(abs(fd - g) / abs(g))
    verdict("A4", max(rel) <= 0.25, f"relative errors {np.round(rel, 3).tolist()}")


# ---------------------------------------------------------------- desk ventricle data for A5 to A7

@pytest.fixture(scope="module")
def desk():
    sc = load_scenario(GOLDEN)
    mesh = sc.build_mesh()
    u = sc.forward_setup(mesh).background()
    trace = clean_trace(sc, mesh)
    return sc, mesh, u, trace


def _error(rep, mesh, center):
    """Distance from argmin G to the vertex nearest to the true centre."""
    proj = mesh.vertices[np.argmin(np.linalg.norm(mesh.vertices - center, axis=1))]
    return float(np.linalg.norm(np.asarray(rep.argmin_global_xyz) - proj))


def _run(desk, **over):
    sc, mesh, u, trace = desk
    s = sc.with_overrides({k.replace("__", "."): str(v) for k, v in over.items()})
    rep = run_reconstruction(s, measurements_from_trace(s, mesh, trace), mesh, u)
    return _error(rep, mesh, np.asarray(sc.inclusion().center)), rep


def test_A5_end_to_end(desk):
    sc, mesh, _, _ = desk
    tol = max(2 * mesh.mean_edge_length(), 0.1 * mesh.diameter())
    errs = {p: _run(desk, measurement__noise=p)[0] for p in (0.0, 0.01, 0.05, 0.10)}
    print(f"A5 info: error at p = 0.10 is {errs[0.10]:.3f} (reported, not asserted)")
    verdict("A5", all(errs[p] <= tol for p in (0.0, 0.01, 0.05)),
            f"tolerance {tol:.3f}, errors p=0: {errs[0.0]:.3f}, p=0.01: {errs[0.01]:.3f}, "
            f"p=0.05: {errs[0.05]:.3f}")


def test_A6_false_positive_discrimination(desk):
    sc, mesh, _, _ = desk
    crime = sc.with_overrides({"measurement.refine": "false",
                               "measurement.allow_inverse_crime": "true"})
    setup = crime.forward_setup(mesh)
    u = setup.background()
    noisy = crime.with_overrides({"measurement.points": "100", "measurement.noise": "0.01"})
    minG = {}
    for name, inc in (("ischemic", "scenario"), ("healthy", None)):
        tr = clean_trace(noisy, mesh, inc)
        minG[name] = run_reconstruction(noisy, measurements_from_trace(noisy, mesh, tr), mesh, u).min_G
    ratio = abs(minG["ischemic"]) / abs(minG["healthy"])
    clean = crime.with_overrides({"measurement.noise": "0"})
    tr0 = clean_trace(clean, mesh, None)
    rep0 = run_reconstruction(clean, measurements_from_trace(clean, mesh, tr0), mesh, u)
    exact_zero = rep0.J == 0.0 and not np.any(rep0.G)

    # the same comparison with data synthesized on the refined mesh, for information
    refined = sc.with_overrides({"measurement.points": "100", "measurement.noise": "0.01"})
    ref_min = {}
    for name, inc in (("ischemic", "scenario"), ("healthy", None)):
        tr = clean_trace(refined, mesh, inc)
        ref_min[name] = run_reconstruction(refined, measurements_from_trace(refined, mesh, tr),
                                           mesh, u).min_G
    print(f"A6 info: refined-mesh synthesis ratio "
          f"{abs(ref_min['ischemic']) / abs(ref_min['healthy']):.2f}")
    verdict("A6", ratio >= 3.0 and exact_zero,
            f"|min G| ischemic {abs(minG['ischemic']):.3g}, healthy {abs(minG['healthy']):.3g}, "
            f"ratio {ratio:.2f}; healthy p=0: J = {rep0.J}, max|G| = {np.abs(rep0.G).max()}")


def test_A7_point_data(desk):
    sc, mesh, _, _ = desk
    tol = 0.15 * mesh.diameter()
    errs = [_run(desk, measurement__points=n)[0] for n in (246, 61, 15)]
    inversions = sum(b < a for a, b in zip(errs, errs[1:]))
    verdict("A7", max(errs) <= tol and inversions <= 1,
            f"tolerance {tol:.3f}, errors N_p=246/61/15: {np.round(errs, 3).tolist()}, "
            f"{inversions} inversion(s)")


# ---------------------------------------------------------------- A8

def test_A8_determinism_and_linearity():
    sc = box_scenario(6, 3.0, 15, inclusion__enabled=True, inclusion__center="0.5, 0.5, 0.5",
                      inclusion__eps=0.25, measurement__points=20, measurement__noise=0.02,
                      measurement__seed=99, measurement__refine=True)
    a = report_to_json(run_reconstruction(sc), sc.header())
    b = report_to_json(run_reconstruction(sc), sc.header())
    identical = a == b and json.loads(a)["provenance"]["scenario_hash"] == sc.hash

    mesh = sc.build_mesh()
    setup = sc.forward_setup(mesh)
    u = setup.background()
    src = source_builder(mesh, setup.gamma, synthesize_measurements(sc, mesh))(u)
    W1 = solve_adjoint(mesh, setup.K0, setup.ionic, u, src)
    Wc = solve_adjoint(mesh, setup.K0, setup.ionic, u, src.scaled(2.5))
    homog = np.abs(Wc.frames - 2.5 * W1.frames).max() / np.abs(2.5 * W1.frames).max()

    # scalar reduction z' = -a z + sin t, z(0) = 0
    lam, T = 2.0, 1.0
    exact = (lam * np.sin(T) - np.cos(T) + np.exp(-lam * T)) / (1 + lam * lam)
    errs = []
    for N in (10, 20, 40):
        t = np.linspace(0.0, T, N + 1)
        z, _ = crank_nicolson([[1.0]], [[lam]], lambda m: np.zeros(1), np.sin(t)[:, None], T / N)
        errs.append(abs(z[-1, 0] - exact))
    order = float(np.log2(errs[1] / errs[2]))
    verdict("A8", identical and homog <= 1e-10 and order >= 1.9,
            f"reports identical: {identical}, homogeneity {homog:.2e}, CN order {order:.3f}")
