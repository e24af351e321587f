import numpy as np
import pytest

from topograd.fem import ConductivityField, assemble_boundary_mass, assemble_mass
from topograd.forward import (BoundaryTrace, SolverError, StepperOptions, TimeGrid,
                              activation_band, activation_times, boundary_trace,
                              solve_background, solve_perturbed, trace_norm_sq)
from topograd.inclusion import InclusionSpec, classify_elements
from topograd.ionic import IonicParams
from topograd.mesh import (VentricleGeometry, boundary_subset, generate_box, mesh_from_arrays)

from conftest import REF_TET

P = IonicParams()
CONSISTENT = StepperOptions(lumped=False)


def _l2(mesh, v):
    return float(np.sqrt(v @ (assemble_mass(mesh) @ v)))


def test_time_grid():
    g = TimeGrid(2.0, 4)
    assert g.tau == 0.5
    assert np.array_equal(g.times(), [0, 0.5, 1, 1.5, 2])
    assert g.trapezoid_weights().sum() == pytest.approx(2.0)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 0)


@pytest.mark.parametrize("value", [0.0, 1.0])
def test_equilibria_are_preserved(small_box, value):
    K = ConductivityField.scalar(small_box, 1.0)
    u = solve_background(small_box, K, P, np.full(small_box.n_vertices, value), TimeGrid(1.0, 5))
    assert np.abs(u.frames - value).max() <= 1e-12


def test_manufactured_heat_space_order():
    """u = (1 + t) cos(pi x) cos(pi y) cos(pi z) solves u_t - lap u = s with Neumann data."""
    T, errors, hs = 0.1, [], []
    for n in (12, 18, 24):
        m = generate_box(n, n, n)
        phi = np.prod(np.cos(np.pi * m.vertices), axis=1)
        M = assemble_mass(m)
        source = lambda t: M @ (phi * (1.0 + 3 * np.pi ** 2 * (1.0 + t)))
        u = solve_background(m, ConductivityField.scalar(m, 1.0), None, phi, TimeGrid(T, 2),
                             CONSISTENT, source=source)
        errors.append(_l2(m, u.final - (1 + T) * phi))
        hs.append(1.0 / n)
    orders = np.diff(np.log(errors)) / np.diff(np.log(hs))
    assert orders.min() >= 1.9, orders


def test_time_step_refinement_order():
    m = generate_box(5, 5, 5)
    phi = np.prod(np.cos(np.pi * m.vertices), axis=1)
    K = ConductivityField.scalar(m, 1.0)
    finals = [solve_background(m, K, None, phi, TimeGrid(0.05, N), CONSISTENT).final
              for N in (5, 10, 20)]
    d1, d2 = _l2(m, finals[0] - finals[1]), _l2(m, finals[1] - finals[2])
    assert np.log2(d1 / d2) >= 0.9


@pytest.fixture(scope="module")
def desk_runs(desk_ventricle):
    m = desk_ventricle
    K = ConductivityField.monodomain(m)
    u0 = activation_band(m)
    grid = TimeGrid(20.0, 100)
    u = solve_background(m, K, P, u0, grid)
    inc = InclusionSpec(VentricleGeometry().point(0.5, -3.5, 0.0), 0.4, 0.1)
    ue = solve_perturbed(m, K, P, u0, grid, inc)
    return m, K, u0, grid, u, inc, ue


def test_band_stimulus_propagates(desk_runs):
    m, _, _, _, u, _, _ = desk_runs
    ml = assemble_mass(m, lumped=True).diagonal()
    active = (u.frames > P.u2) @ ml
    assert np.all(np.diff(active) >= 0)
    assert active[-1] > 0.9 * m.volume() > 2 * active[0]


def test_maximum_principle_on_desk(desk_runs):
    _, _, _, _, u, _, ue = desk_runs
    for f in (u, ue):
        assert f.frames.min() >= P.u1 - 1e-8 and f.frames.max() <= P.u3 + 1e-8


def test_front_delay_behind_inclusion(desk_runs):
    m, _, _, _, u, inc, ue = desk_runs
    probe = VentricleGeometry().point(0.5, -4.6, 0.0)
    k = int(np.argmin(np.linalg.norm(m.vertices - probe, axis=1)))
    t_bg = activation_times(u, P.u2)[k]
    t_inc = activation_times(ue, P.u2)[k]
    assert t_bg <= u.grid.N and t_inc >= t_bg


def test_zero_contrast_empty_inclusion_is_bitwise_background(small_box):
    K = ConductivityField.scalar(small_box, 1.0)
    u0 = np.where(small_box.vertices[:, 0] < 0.3, 1.0, 0.0)
    grid = TimeGrid(2.0, 10)
    u = solve_background(small_box, K, P, u0, grid)
    inc = InclusionSpec((0.5, 0.5, 0.5), 1e-9, 1.0)
    with pytest.warns(UserWarning):
        ue = solve_perturbed(small_box, K, P, u0, grid, inc)
    assert np.array_equal(u.frames, ue.frames)
    g = boundary_subset(small_box, "endocardium")
    diff = boundary_trace(u, g) - boundary_trace(ue, g)
    assert np.array_equal(diff.values, np.zeros_like(diff.values))


def test_perturbation_shrinks_with_inclusion():
    m = generate_box(12, 12, 12)
    K = ConductivityField.scalar(m, 1.0)
    u0 = np.where(m.vertices[:, 0] < 0.15, 1.0, 0.0)
    grid = TimeGrid(4.0, 40)
    u = solve_background(m, K, P, u0, grid)
    norms = []
    for eps in (0.3, 0.2, 0.12):
        ue = solve_perturbed(m, K, P, u0, grid, InclusionSpec((0.5, 0.5, 0.5), eps, 0.1))
        w = ue.frames - u.frames
        norms.append(max(_l2(m, wn) for wn in w))
    assert norms[2] > 0
    assert norms[0] > norms[1] > norms[2]


def test_constant_field_has_constant_trace(small_box):
    K = ConductivityField.scalar(small_box, 1.0)
    u = solve_background(small_box, K, P, np.ones(small_box.n_vertices), TimeGrid(1.0, 4))
    tr = boundary_trace(u, boundary_subset(small_box, "epicardium"))
    assert np.abs(tr.values - 1.0).max() <= 1e-12


def test_trace_norm_single_triangle():
    m = mesh_from_arrays(REF_TET, [[0, 1, 2, 3]], tag="other")
    tags = np.array(["other"] * 4, dtype="<U11")
    bottom = np.flatnonzero(np.all(m.vertices[m.boundary_faces][:, :, 2] == 0, axis=1))
    tags[bottom] = "endocardium"
    m = type(m)(m.vertices, m.tets, m.boundary_faces, tags, m.fiber_frames, {})
    g = boundary_subset(m, "endocardium")
    grid = TimeGrid(1.0, 4)
    t = grid.times()
    vals = np.stack([np.array([1.0 + s, -2.0 * s, 0.5 + s * s]) for s in t])    # on nodes 0,1,2
    trace = BoundaryTrace(grid, np.array([0, 1, 2]), vals)
    got = trace_norm_sq(trace, assemble_boundary_mass(m, g), m.n_vertices)
    # edge-midpoint rule integrates the quadratic u^2 exactly on the triangle (area 1/2)
    mids = 0.5 * (vals[:, [0, 1, 2]] + vals[:, [1, 2, 0]])
    per_frame = (0.5 / 3.0) * (mids ** 2).sum(axis=1)
    assert got == pytest.approx(grid.trapezoid_weights() @ per_frame, abs=1e-10)


def test_solver_rejects_bad_initial_data(small_box):
    K = ConductivityField.scalar(small_box, 1.0)
    with pytest.raises(ValueError):
        solve_background(small_box, K, P, np.ones(3), TimeGrid(1.0, 2))
    bad = np.ones(small_box.n_vertices)
    bad[0] = np.nan
    with pytest.raises(ValueError):
        solve_background(small_box, K, P, bad, TimeGrid(1.0, 2))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step(small_box):
    K = ConductivityField.scalar(small_box, 1.0)
    u0 = np.full(small_box.n_vertices, 50.0)         # far outside [u1, u3]: cubic blow-up
    with pytest.raises(SolverError) as err:
        solve_background(small_box, K, P, u0, TimeGrid(10.0, 10))
    assert err.value.step >= 1


def test_activation_band_support(desk_ventricle):
    u0 = activation_band(desk_ventricle, z_range=(-2.0, 1.5))
    assert set(np.unique(u0)) == {0.0, 1.0}
    z = desk_ventricle.vertices[u0 == 1.0, 2]
    assert z.min() >= -2.0 and z.max() <= 1.5
