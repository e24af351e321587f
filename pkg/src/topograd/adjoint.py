"""Backward adjoint problem driven by the boundary data mismatch.

The adjoint ``W`` runs backward from ``W(T) = 0``.  It is integrated in the
reversed variable ``Z(s) = W(T - s)``, a forward parabolic problem, with
Crank-Nicolson:

    (M + tau/2 (K + D^{m+1})) z^{m+1} = (M - tau/2 (K + D^m)) z^m + tau/2 (g^m + g^{m+1})

where ``D^m = M_L diag(f'(u))`` and ``g^m = B r`` are taken at the reversed
time index and ``B`` is the quadratic form of the measurement (boundary mass
on Gamma, or point weights).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import ionic as ionic_model
from .fem import ConductivityField, assemble_boundary_mass, assemble_mass
from .forward import (BoundaryTrace, SolverError, StepperOptions, TimeGrid,
                      TimeSeriesField, system_stiffness)
from .mesh import BoundarySubset, Mesh
from .sparse_linalg import ConvergenceError, SparseMatrix, cg_solve


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MismatchSource:
    """Residual ``u - u_meas`` on the measurement nodes at every time level.

    ``weights`` is the (V, V) quadratic form used both in the cost functional
    and as the adjoint boundary load.
    """

    grid: TimeGrid
    nodes: np.ndarray
    residual: np.ndarray      # (N+1, len(nodes))
    weights: SparseMatrix

    def __post_init__(self):
        if self.residual.shape != (self.grid.N + 1, len(self.nodes)):
            raise ValueError(f"residual shape {self.residual.shape} does not match "
                             f"{self.grid.N + 1} frames x {len(self.nodes)} nodes")
        if not np.all(np.isfinite(self.residual)):
            raise ValueError("residual is not finite")

    @property
    def n_vertices(self):
        return self.weights.n_rows

    def full(self):
        """Residual scattered to all vertices, shape (N+1, V)."""
        out = np.zeros((self.grid.N + 1, self.n_vertices))
        out[:, self.nodes] = self.residual
        return out

    def loads(self):
        """Adjoint boundary loads ``B r^n``, shape (N+1, V)."""
        return (self.weights.csr @ self.full().T).T

    def scaled(self, c):
        return MismatchSource(self.grid, self.nodes, c * self.residual, self.weights)


def gamma_source(mesh: Mesh, gamma: BoundarySubset, u_trace: BoundaryTrace,
                 meas: BoundaryTrace) -> MismatchSource:
    """Mismatch on the whole measured surface, weighted by its P1 mass matrix."""
    r = u_trace - meas
    return MismatchSource(r.grid, r.nodes, r.values, assemble_boundary_mass(mesh, gamma))


def point_weights(mesh: Mesh, gamma: BoundarySubset, nodes):
    """Diagonal weights: each measured node carries its lumped boundary-mass share."""
    lumped = assemble_boundary_mass(mesh, gamma, lumped=True).diagonal()
    w = np.zeros(mesh.n_vertices)
    w[nodes] = lumped[nodes]
    return SparseMatrix(sp.diags(w, format="csr"))


def point_source(mesh: Mesh, gamma: BoundarySubset, u_trace: BoundaryTrace,
                 meas: BoundaryTrace) -> MismatchSource:
    r = u_trace - meas
    return MismatchSource(r.grid, r.nodes, r.values, point_weights(mesh, gamma, r.nodes))


def crank_nicolson(M, K, reaction, loads, tau, solve_opts=None, z0=None):
    """Integrate ``M z' + (K + diag(d(m))) z = g`` from ``z(0) = z0`` (zero by default).

    ``M`` and ``K`` are sparse (or dense) square matrices, ``reaction(m)``
    returns the diagonal ``d`` at level ``m`` and ``loads[m]`` is ``g`` at level
    ``m``.  Returns the ``(N+1, n)`` trajectory and the total CG iterations.
    """
    M, K = sp.csr_matrix(M), sp.csr_matrix(K)
    loads = np.asarray(loads, dtype=float)
    N, n = loads.shape[0] - 1, M.shape[0]
    z = np.zeros((N + 1, n))
    if z0 is not None:
        z[0] = z0
    d_prev = reaction(0)
    iters = 0
    for m in range(N):
        d_next = reaction(m + 1)
        lhs = SparseMatrix(M + 0.5 * tau * (K + sp.diags(d_next)))
        rhs = (M @ z[m] - 0.5 * tau * (K @ z[m] + d_prev * z[m])
               + 0.5 * tau * (loads[m] + loads[m + 1]))
        try:
            res = cg_solve(lhs, rhs, solve_opts, x0=z[m])
        except (ConvergenceError, FloatingPointError) as exc:
            raise SolverError(str(exc), m + 1) from exc
        if not np.all(np.isfinite(res.x)):
            raise SolverError("non-finite adjoint values", m + 1)
        z[m + 1] = res.x
        iters += res.iterations
        d_prev = d_next
    return z, iters


def solve_adjoint(mesh: Mesh, K0: ConductivityField, ionic, u: TimeSeriesField,
                  source: MismatchSource, grid: TimeGrid | None = None,
                  opts: StepperOptions = StepperOptions(), rhs_k0=False) -> TimeSeriesField:
    """Adjoint trajectory ``W`` with ``W[N] = 0``.

    ``ionic=None`` drops the reaction Jacobian.  With ``rhs_k0`` the boundary
    load is multiplied by the reference conductivity.
    """
    grid = grid or u.grid
    if u.grid != grid or source.grid != grid:
        raise ValueError("the trajectory and the mismatch source must share the adjoint time grid")
    tau = grid.tau
    N = grid.N
    if ionic is not None:
        fmax = ionic_model.max_abs_f_prime(ionic, float(u.frames.min()), float(u.frames.max()))
        if tau * fmax >= 2.0:
            raise ConfigurationError(
                f"time step {tau:g} too large for the reaction bound 2/max|f'| = {2 / fmax:g}")
    K = system_stiffness(mesh, K0, opts.monotone).csr
    M = assemble_mass(mesh, lumped=opts.lumped).csr
    ml = assemble_mass(mesh, lumped=True).diagonal()
    loads = source.loads()
    if rhs_k0:
        loads = loads * K0.reference

    def reaction(m):
        if ionic is None:
            return np.zeros(mesh.n_vertices)
        return ml * ionic_model.f_prime(u.frames[N - m], ionic)

    try:
        z, iters = crank_nicolson(M, K, reaction, loads[::-1], tau, opts.solve)
    except SolverError as exc:
        raise SolverError(str(exc).split(": ", 1)[-1], N - exc.step) from exc
    return TimeSeriesField(grid, z[::-1].copy(), "W", {"cg_iterations": iters, "rhs_k0": rhs_k0})
