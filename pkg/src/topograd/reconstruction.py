"""Cost functional, topological gradient and the one-shot reconstruction.

The topological gradient at a vertex ``z`` is

    G(z) = int_0^T  (k0 - k1) (M grad u(z)) . grad W(z) + f(u(z)) W(z)  dt

with ``u`` the background trajectory, ``W`` the adjoint and ``M`` the
polarization tensor; its minimizer estimates the inclusion center.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ionic as ionic_model
from .adjoint import MismatchSource, solve_adjoint
from .fem import (ConductivityField, assemble_mass, assemble_stiffness,
                  gradient_operator)
from .forward import (BoundaryTrace, StepperOptions, TimeGrid, TimeSeriesField,
                      boundary_trace, solve_background, solve_perturbed)
from .inclusion import (InclusionSpec, boundary_distance, classify_elements,
                        is_well_separated, polarization_sphere)
from .mesh import BoundarySubset, Mesh, locate_point

log = logging.getLogger(__name__)


@dataclass(eq=False)
class ForwardSetup:
    """Everything needed to run the background/adjoint pair on one mesh."""

    mesh: Mesh
    K0: ConductivityField
    ionic: ionic_model.IonicParams
    u0: np.ndarray
    grid: TimeGrid
    gamma: BoundarySubset
    stepper: StepperOptions = StepperOptions()
    rhs_k0: bool = False

    def background(self) -> TimeSeriesField:
        return solve_background(self.mesh, self.K0, self.ionic, self.u0, self.grid, self.stepper)

    def perturbed(self, inc: InclusionSpec, elements=None) -> TimeSeriesField:
        return solve_perturbed(self.mesh, self.K0, self.ionic, self.u0, self.grid, inc,
                               self.stepper, elements)


@dataclass
class ReconstructionReport:
    J: float
    min_G: float
    argmin_global: int
    argmin_global_xyz: list
    argmin_separated: int | None
    argmin_separated_xyz: list | None
    G: np.ndarray = field(repr=False)
    flags: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d.pop("G")
        return d


# ---------------------------------------------------------------- cost

def cost_J(source: MismatchSource) -> float:
    """``1/2 int_0^T r^T B r dt`` with trapezoidal time quadrature."""
    r = source.full()
    per_frame = np.einsum("ni,ni->n", r, (source.weights.csr @ r.T).T)
    return 0.5 * float(source.grid.trapezoid_weights() @ per_frame)


def cost_from_traces(u_trace: BoundaryTrace, meas: BoundaryTrace, weights) -> float:
    r = u_trace - meas
    return cost_J(MismatchSource(r.grid, r.nodes, r.values, weights))


# ---------------------------------------------------------------- gradient

def contrast_tensors(mesh: Mesh, K0: ConductivityField, k1: float):
    """Nodal ``(K0 - K1)`` tensors; scalar ``k0 - k1`` for isotropic backgrounds."""
    if K0.isotropic:
        return None, K0.reference - k1
    vol = mesh.volumes()
    node = np.zeros((mesh.n_vertices, 3, 3))
    weight = np.zeros(mesh.n_vertices)
    for j in range(4):
        np.add.at(node, mesh.tets[:, j], vol[:, None, None] * K0.tensors)
        np.add.at(weight, mesh.tets[:, j], vol)
    node /= weight[:, None, None]
    return node * (1.0 - k1 / K0.reference), None


def topological_gradient(mesh: Mesh, u: TimeSeriesField, W: TimeSeriesField, M, K0, k1,
                         ionic) -> np.ndarray:
    """Nodal topological gradient.

    ``K0`` is a :class:`ConductivityField` or a scalar ``k0``.  For anisotropic
    fields the gradient term contracts ``M_ij (K0 - K1)_ik d_k u d_j W`` with
    ``K1 = (k1 / k_ref) K0``.
    """
    if u.grid != W.grid:
        raise ValueError("u and W live on different time grids")
    if u.frames.shape != W.frames.shape:
        raise ValueError("u and W have different shapes")
    if not isinstance(K0, ConductivityField):
        K0 = ConductivityField.scalar(mesh, float(K0))
    w = u.grid.trapezoid_weights()
    ops = gradient_operator(mesh)
    U, Wt = u.frames.T, W.frames.T                      # (V, N+1)
    gu = np.stack([op @ U for op in ops])               # (3, V, N+1)
    gw = np.stack([op @ Wt for op in ops])
    tensor, scalar = contrast_tensors(mesh, K0, k1)
    M = np.asarray(M, dtype=float)
    if tensor is None:
        Mgu = np.einsum("ab,bvn->avn", scalar * M, gu)
    else:
        Mgu = np.einsum("ab,vbc,cvn->avn", M, tensor, gu)
    grad_term = np.einsum("avn,avn->vn", gw, Mgu)
    react = ionic_model.f(U, ionic) * Wt if ionic is not None else 0.0
    return (grad_term + react) @ w


def polarization_for(K0: ConductivityField, k1: float):
    """Sphere polarization tensor; the fibre eigenvalue stands in for ``k0`` when anisotropic."""
    return polarization_sphere(K0.reference, k1)


def interpolate(mesh: Mesh, nodal, point):
    tet, bary = locate_point(mesh, point)
    return float(bary @ np.asarray(nodal)[mesh.tets[tet]])


# ---------------------------------------------------------------- reconstruction

def argmin_vertex(G, candidates=None):
    """Lowest-index vertex attaining the minimum (over ``candidates`` if given)."""
    if candidates is None:
        return int(np.argmin(G))
    candidates = np.asarray(candidates)
    if len(candidates) == 0:
        return None
    return int(candidates[np.argmin(G[candidates])])


def reconstruct(setup: ForwardSetup, source_builder, k1: float, d0: float = 0.0,
                truth: InclusionSpec | None = None, large_fraction: float = 0.1,
                background: TimeSeriesField | None = None) -> ReconstructionReport:
    """One-shot reconstruction: background, adjoint, topological gradient, argmin.

    ``source_builder(u_trace)`` turns the background trace on the measurement
    nodes into a :class:`MismatchSource` (it closes over the measurements).
    """
    mesh = setup.mesh
    u = background if background is not None else setup.background()
    source = source_builder(u)
    if len(source.nodes) == 0:
        raise ValueError("empty measurement set")
    J = cost_J(source)
    W = solve_adjoint(mesh, setup.K0, setup.ionic, u, source, setup.grid, setup.stepper,
                      rhs_k0=setup.rhs_k0)
    M = polarization_for(setup.K0, k1)
    G = topological_gradient(mesh, u, W, M, setup.K0, k1, setup.ionic)

    g_idx = argmin_vertex(G)
    dist = boundary_distance(mesh, mesh.vertices)
    sep = argmin_vertex(G, np.flatnonzero(dist >= d0)) if d0 > 0 else g_idx
    flags, warns = [], []
    if J == 0.0 and not np.any(G):
        flags.append("no inclusion evidence")
    if not setup.K0.isotropic:
        flags.append("polarization tensor: isotropic-sphere surrogate")
    if setup.rhs_k0:
        flags.append("adjoint load scaled by k0")
    if truth is not None:
        if truth.eps > large_fraction * mesh.diameter() or (d0 > 0 and not is_well_separated(mesh, truth, d0)):
            flags.append("asymptotic assumptions violated")
    if sep is None:
        warns.append(f"no vertex at distance >= {d0} from the boundary")

    diag = {"n_measurement_nodes": int(len(source.nodes)),
            "cg_iterations_forward": u.meta.get("cg_iterations"),
            "cg_iterations_adjoint": W.meta.get("cg_iterations"),
            "u_min": float(u.frames.min()), "u_max": float(u.frames.max()),
            "W_abs_max": float(np.abs(W.frames).max())}
    if truth is not None:
        err = float(np.linalg.norm(mesh.vertices[g_idx] - np.asarray(truth.center)))
        diag["localization_error"] = err
        diag["localization_error_relative"] = err / mesh.diameter()
    report = ReconstructionReport(
        J=float(J), min_G=float(G[g_idx]), argmin_global=g_idx,
        argmin_global_xyz=mesh.vertices[g_idx].tolist(),
        argmin_separated=sep,
        argmin_separated_xyz=None if sep is None else mesh.vertices[sep].tolist(),
        G=G, flags=flags, warnings=warns, diagnostics=diag)
    report.W = W
    report.u = u
    return report


# ---------------------------------------------------------------- asymptotics

@dataclass
class RateRow:
    eps: float
    volume: float
    n_elements: int
    linf_l2: float
    l2_h1: float
    l2_l2: float
    J: float
    boundary_functional: float
    leading_term: float
    ratio: float
    warning: str | None = None


@dataclass
class RateTable:
    rows: list
    slopes: dict
    G_center: float
    center: list
    J0: float = 0.0

    def as_records(self):
        return [asdict(r) for r in self.rows]


def _fit_slope(x, y):
    x, y = np.log(np.asarray(x)), np.log(np.asarray(y))
    return float(np.polyfit(x, y, 1)[0])


def asymptotics_study(setup: ForwardSetup, source_builder, center, eps_list, k1: float,
                      min_elements: int = 8) -> RateTable:
    """Shrink a spherical inclusion at ``center`` and tabulate perturbation norms and the
    boundary functional against its first-order prediction ``|w_eps| G(center)``."""
    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps list must be strictly decreasing")
    mesh, grid = setup.mesh, setup.grid
    u = setup.background()
    source = source_builder(u)
    J0 = cost_J(source)
    W = solve_adjoint(mesh, setup.K0, setup.ionic, u, source, grid, setup.stepper,
                      rhs_k0=setup.rhs_k0)
    M = polarization_for(setup.K0, k1)
    G = topological_gradient(mesh, u, W, M, setup.K0, k1, setup.ionic)
    g_center = interpolate(mesh, G, center)

    mass = assemble_mass(mesh, lumped=False)
    lap = assemble_stiffness(mesh, 1.0)
    tw = grid.trapezoid_weights()
    B = source.weights.csr
    r_full = source.full()
    rows = []
    for eps in eps_list:
        inc = InclusionSpec(tuple(center), eps, k1)
        el = classify_elements(mesh, inc)
        warn = None
        if len(el) < min_elements:
            warn = f"inclusion resolved by only {len(el)} elements"
        ue = setup.perturbed(inc, el)
        w = ue.frames - u.frames
        l2 = np.einsum("ni,ni->n", w, (mass.csr @ w.T).T)
        h1 = np.einsum("ni,ni->n", w, (lap.csr @ w.T).T)
        bf = float(tw @ np.einsum("ni,ni->n", r_full, (B @ w.T).T))
        pert_source = source_builder(ue)
        J = cost_J(pert_source)
        lead = el.volume * g_center
        rows.append(RateRow(eps, el.volume, len(el), float(np.sqrt(l2.max())),
                            float(np.sqrt(tw @ (l2 + h1))), float(np.sqrt(tw @ l2)),
                            J, bf, lead, bf / lead if lead != 0 else float("nan"), warn))
        log.info("eps=%g |w|=%g elements=%d ratio=%g", eps, el.volume, len(el), rows[-1].ratio)
    vols = [r.volume for r in rows]
    slopes = {"l2_h1": _fit_slope(vols, [r.l2_h1 for r in rows]),
              "l2_l2": _fit_slope(vols, [r.l2_l2 for r in rows]),
              "linf_l2": _fit_slope(vols, [r.linf_l2 for r in rows])}
    return RateTable(rows, slopes, g_center, list(map(float, center)), J0)
