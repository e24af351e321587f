"""Semi-implicit time stepping of the background and perturbed monodomain problems.

Each step solves ``(M + tau K) u^{n+1} = M u^n - tau M_r f(u^n)`` with implicit
diffusion and a lagged (explicit) ionic term, ``M_r`` being the lumped mass of
the elements that carry ionic current.  Homogeneous Neumann conditions are
natural and need no boundary terms.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import ionic as ionic_model
from .fem import (ConductivityField, assemble_mass, assemble_stiffness,
                  discrete_upwind)
from .inclusion import InclusionSpec, classify_elements, perturbed_conductivity
from .mesh import BoundarySubset, Mesh, boundary_subset
from .sparse_linalg import ConvergenceError, SolveOptions, SparseMatrix, cg_solve

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """A time step failed; ``step`` is the index of the step being computed."""

    def __init__(self, message, step):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class TimeGrid:
    T: float = 30.0
    N: int = 150

    def __post_init__(self):
        if self.N < 1 or not self.T > 0:
            raise ValueError("time grid needs N >= 1 and T > 0")

    @property
    def tau(self):
        return self.T / self.N

    def times(self):
        return np.linspace(0.0, self.T, self.N + 1)

    def trapezoid_weights(self):
        w = np.full(self.N + 1, self.tau)
        w[[0, -1]] *= 0.5
        return w


@dataclass(eq=False)
class TimeSeriesField:
    """Nodal values on every time level; ``frames[n]`` is the field at ``t^n``."""

    grid: TimeGrid
    frames: np.ndarray
    name: str = "u"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.frames.shape[0] != self.grid.N + 1:
            raise ValueError(f"{self.frames.shape[0]} frames for a grid with N={self.grid.N}")

    @property
    def final(self):
        return self.frames[-1]

    def reversed(self):
        return TimeSeriesField(self.grid, self.frames[::-1].copy(), self.name, dict(self.meta))


@dataclass(frozen=True, eq=False)
class BoundaryTrace:
    grid: TimeGrid
    nodes: np.ndarray     # global vertex ids
    values: np.ndarray    # (N+1, len(nodes))

    def __sub__(self, other):
        _check_aligned(self, other)
        return BoundaryTrace(self.grid, self.nodes, self.values - other.values)


def _check_aligned(a, b):
    if a.grid != b.grid:
        raise ValueError("traces live on different time grids")
    if not np.array_equal(a.nodes, b.nodes):
        raise ValueError("traces live on different node sets")


@dataclass(frozen=True)
class StepperOptions:
    lumped: bool = True           # lumped mass in the time derivative
    monotone: bool = True         # discrete upwinding of positive stiffness couplings
    solve: SolveOptions = SolveOptions(tolerance=1e-12)


def system_stiffness(mesh: Mesh, K: ConductivityField, monotone=True) -> SparseMatrix:
    A = assemble_stiffness(mesh, K)
    return discrete_upwind(A) if monotone else A


def _step_loop(mesh, K, reaction_mass, ionic, u0, grid, opts: StepperOptions,
               source=None, name="u"):
    u0 = np.asarray(u0, dtype=float)
    if u0.shape != (mesh.n_vertices,):
        raise ValueError(f"initial datum has shape {u0.shape}, mesh has {mesh.n_vertices} vertices")
    if not np.all(np.isfinite(u0)):
        raise ValueError("initial datum is not finite")
    tau = grid.tau
    M = assemble_mass(mesh, lumped=opts.lumped)
    A = M + tau * K
    frames = np.empty((grid.N + 1, mesh.n_vertices))
    frames[0] = u0
    t = grid.times()
    iters = 0
    for n in range(grid.N):
        u = frames[n]
        rhs = M @ u
        if ionic is not None:
            rhs -= tau * (reaction_mass @ ionic_model.f(u, ionic))
        if source is not None:
            rhs += tau * source(t[n + 1])
        if not np.all(np.isfinite(rhs)):
            raise SolverError("non-finite right-hand side", n + 1)
        try:
            res = cg_solve(A, rhs, opts.solve, x0=u)
        except ConvergenceError as exc:
            raise SolverError(str(exc), n + 1) from exc
        if not np.all(np.isfinite(res.x)):
            raise SolverError("non-finite values", n + 1)
        frames[n + 1] = res.x
        iters += res.iterations
    log.debug("%s: %d steps, %d CG iterations", name, grid.N, iters)
    return TimeSeriesField(grid, frames, name, {"cg_iterations": iters,
                                               "min": float(frames.min()),
                                               "max": float(frames.max())})


def solve_background(mesh: Mesh, K0: ConductivityField, ionic, u0, grid: TimeGrid,
                     opts: StepperOptions = StepperOptions(), source=None) -> TimeSeriesField:
    """Background trajectory ``u`` on every time level.

    ``ionic=None`` switches the reaction off (linear heat equation).  ``source``
    is an optional callable ``t -> load vector`` added to the right-hand side.
    """
    K = system_stiffness(mesh, K0, opts.monotone)
    Mr = assemble_mass(mesh, lumped=True)
    return _step_loop(mesh, K, Mr, ionic, u0, grid, opts, source)


def solve_perturbed(mesh: Mesh, K0: ConductivityField, ionic, u0, grid: TimeGrid,
                    inc: InclusionSpec, opts: StepperOptions = StepperOptions(),
                    elements=None) -> TimeSeriesField:
    """Trajectory ``u_eps`` with conductivity ``k1`` and no ionic current inside the inclusion."""
    el = classify_elements(mesh, inc) if elements is None else elements
    K = system_stiffness(mesh, perturbed_conductivity(K0, el, inc.k1), opts.monotone)
    healthy = np.ones(mesh.n_tets, dtype=bool)
    healthy[el.elements] = False
    Mr = assemble_mass(mesh, lumped=True, elements=healthy)
    out = _step_loop(mesh, K, Mr, ionic, u0, grid, opts, name="u_eps")
    out.meta.update(inclusion_elements=len(el), inclusion_volume=el.volume)
    return out


def boundary_trace(field: TimeSeriesField, gamma: BoundarySubset | np.ndarray) -> BoundaryTrace:
    nodes = gamma.nodes if isinstance(gamma, BoundarySubset) else np.asarray(gamma, dtype=np.int64)
    return BoundaryTrace(field.grid, nodes, field.frames[:, nodes].copy())


def trace_norm_sq(trace: BoundaryTrace, boundary_mass: SparseMatrix, n_vertices: int):
    """``||trace||^2`` in L2(0,T; L2(Gamma)) with trapezoidal time quadrature."""
    full = np.zeros((trace.values.shape[0], n_vertices))
    full[:, trace.nodes] = trace.values
    per_frame = np.einsum("ni,ni->n", full, (boundary_mass.csr @ full.T).T)
    return float(trace.grid.trapezoid_weights() @ per_frame)


# ---------------------------------------------------------------- initial data

def activation_band(mesh: Mesh, tag="endocardium", depth=0.45, z_range=(-2.0, 1.5), value=1.0,
                    background=0.0, ramp=0.0):
    """Initial stimulus on a band of a tagged surface.

    ``value`` on nodes within ``depth`` of the surface and with ``z`` inside
    ``z_range``, ``background`` elsewhere.  A positive ``ramp`` (cm) replaces
    the jumps by linear transitions of that width, centred on the band edges.
    """
    nodes = boundary_subset(mesh, tag).nodes
    dist = cKDTree(mesh.vertices[nodes]).query(mesh.vertices)[0]
    z = mesh.vertices[:, 2]
    if ramp > 0:
        def up(x):
            return np.clip(0.5 + x / ramp, 0.0, 1.0)
        w = up(depth - dist) * up(z - z_range[0]) * up(z_range[1] - z)
    else:
        w = ((dist <= depth) & (z >= z_range[0]) & (z <= z_range[1])).astype(float)
    return background + (value - background) * w


def activation_slab(mesh: Mesh, axis=0, width=0.25, value=1.0, background=0.0):
    """Initial stimulus on the slab ``x_axis <= min + width`` (box meshes)."""
    x = mesh.vertices[:, axis]
    u0 = np.full(mesh.n_vertices, float(background))
    u0[x <= x.min() + width + 1e-12] = value
    return u0


def activation_times(field: TimeSeriesField, threshold):
    """First time index with ``u > threshold`` per vertex (``N + 1`` if never)."""
    above = field.frames > threshold
    first = np.argmax(above, axis=0)
    first[~above.any(axis=0)] = field.grid.N + 1
    return first
