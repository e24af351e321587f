"""P1 finite elements on tetrahedra.

Mass, anisotropic stiffness and boundary mass matrices, the lumped ionic
reaction load, and nodal gradient recovery.  Element matrices are computed in
closed form from the barycentric-coordinate gradients.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .mesh import BoundarySubset, Mesh
from .sparse_linalg import SolveOptions, SparseMatrix, TripletAccumulator, cg_solve

# Monodomain conductivity eigenvalues (fibre, sheet, transmural).
INTRA_EIGENVALUES = (3.0, 1.0, 0.315)
EXTRA_EIGENVALUES = (2.0, 1.65, 1.351)


class DegenerateElementError(ValueError):
    def __init__(self, element, volume):
        super().__init__(f"element {element} is degenerate (volume {volume:.3e})")
        self.element = element


@dataclass(frozen=True, eq=False)
class _Geometry:
    volumes: np.ndarray    # (E,)
    grads: np.ndarray      # (E, 4, 3) barycentric gradients


@lru_cache(maxsize=16)
def element_geometry(mesh: Mesh) -> _Geometry:
    p = mesh.vertices[mesh.tets]
    jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=2)
    det = np.linalg.det(jac)
    vol = det / 6.0
    scale = np.linalg.norm(p[:, 1:] - p[:, :1], axis=2).max(axis=1) ** 3
    bad = np.flatnonzero(np.abs(det) <= 1e-14 * scale)
    if len(bad):
        raise DegenerateElementError(int(bad[0]), float(vol[bad[0]]))
    inv = np.linalg.inv(jac)            # rows: gradients of lambda_1..3
    g = np.empty((len(vol), 4, 3))
    g[:, 1:] = inv
    g[:, 0] = -inv.sum(axis=1)
    return _Geometry(np.abs(vol), g)


# ---------------------------------------------------------------- conductivity

@dataclass(frozen=True, eq=False)
class ConductivityField:
    """Per-element symmetric positive-definite conductivity tensors.

    ``reference`` is the scalar background conductivity used by the
    polarization tensor: ``k0`` for isotropic fields, the fibre-direction
    eigenvalue for anisotropic ones.
    """

    tensors: np.ndarray     # (E, 3, 3)
    reference: float
    isotropic: bool

    @classmethod
    def scalar(cls, mesh: Mesh, k0: float):
        if not k0 > 0:
            raise ValueError("conductivity must be positive")
        t = np.broadcast_to(k0 * np.eye(3), (mesh.n_tets, 3, 3)).copy()
        return cls(t, float(k0), True)

    @classmethod
    def monodomain(cls, mesh: Mesh, intra=INTRA_EIGENVALUES, extra=EXTRA_EIGENVALUES):
        """Harmonic combination ``Ke (Ke + Ki)^-1 Ki`` of orthotropic tensors.

        Vertex tensors are built from the fibre frames and averaged over the
        four vertices of each element.
        """
        node = nodal_monodomain_tensors(mesh, intra, extra)
        t = node[mesh.tets].mean(axis=1)
        t = 0.5 * (t + np.swapaxes(t, 1, 2))
        eig = monodomain_eigenvalues(intra, extra)
        return cls(t, float(eig[0]), False)

    def check(self):
        sym = np.abs(self.tensors - np.swapaxes(self.tensors, 1, 2)).max()
        if sym > 1e-12 * np.abs(self.tensors).max():
            raise ValueError("conductivity tensors are not symmetric")
        if np.linalg.eigvalsh(self.tensors).min() <= 0:
            raise ValueError("conductivity tensors are not positive definite")
        return self

    def with_elements_scaled(self, elements, factor):
        t = self.tensors.copy()
        t[np.asarray(elements, dtype=np.int64)] *= factor
        return ConductivityField(t, self.reference, self.isotropic)


def monodomain_eigenvalues(intra=INTRA_EIGENVALUES, extra=EXTRA_EIGENVALUES):
    ki, ke = np.asarray(intra, float), np.asarray(extra, float)
    if np.any(ki <= 0) or np.any(ke <= 0):
        raise ValueError("conductivity eigenvalues must be positive")
    return ke * ki / (ke + ki)


def orthotropic_tensors(frames, eigenvalues):
    """``sum_a k_a e_a (x) e_a`` for frames with rows (e_f, e_t, e_r)."""
    return np.einsum("vai,a,vaj->vij", frames, np.asarray(eigenvalues, float), frames)


def nodal_monodomain_tensors(mesh: Mesh, intra=INTRA_EIGENVALUES, extra=EXTRA_EIGENVALUES):
    Ki = orthotropic_tensors(mesh.fiber_frames, intra)
    Ke = orthotropic_tensors(mesh.fiber_frames, extra)
    K = Ke @ np.linalg.solve(Ke + Ki, Ki)
    return 0.5 * (K + np.swapaxes(K, 1, 2))


# ---------------------------------------------------------------- assembly

def _scatter(mesh: Mesh, local, n_local=4, conn=None):
    conn = mesh.tets if conn is None else conn
    rows = np.repeat(conn, n_local, axis=1)
    cols = np.tile(conn, (1, n_local))
    acc = TripletAccumulator(mesh.n_vertices)
    acc.add(rows, cols, local.reshape(len(conn), -1))
    return acc.tocsr()


def assemble_mass(mesh: Mesh, lumped=False, elements=None) -> SparseMatrix:
    """P1 mass matrix, optionally row-sum lumped and/or restricted to ``elements``."""
    geo = element_geometry(mesh)
    vol = geo.volumes
    tets = mesh.tets
    if elements is not None:
        elements = np.asarray(elements)
        if elements.dtype == bool:
            elements = np.flatnonzero(elements)
        vol, tets = vol[elements], tets[elements]
    if lumped:
        d = np.bincount(tets.ravel(), weights=np.repeat(vol / 4.0, 4), minlength=mesh.n_vertices)
        return SparseMatrix.diagonal_matrix(d)
    local = (np.ones((4, 4)) + np.eye(4))[None] * (vol / 20.0)[:, None, None]
    return _scatter(mesh, local, conn=tets)


def assemble_stiffness(mesh: Mesh, K: ConductivityField | float = 1.0) -> SparseMatrix:
    """P1 stiffness ``int K grad(phi_j) . grad(phi_i)``."""
    geo = element_geometry(mesh)
    if not isinstance(K, ConductivityField):
        K = ConductivityField.scalar(mesh, float(K))
    g = geo.grads
    local = np.einsum("eia,eab,ejb->eij", g, K.tensors, g) * geo.volumes[:, None, None]
    return _scatter(mesh, local)


def assemble_boundary_mass(mesh: Mesh, gamma: BoundarySubset, lumped=False) -> SparseMatrix:
    """P1 surface mass matrix over the faces of ``gamma``."""
    if gamma is None or len(gamma.face_indices) == 0:
        raise ValueError("boundary subset is empty")
    faces = mesh.boundary_faces[gamma.face_indices]
    area = mesh.face_areas(faces)
    if lumped:
        d = np.bincount(faces.ravel(), weights=np.repeat(area / 3.0, 3), minlength=mesh.n_vertices)
        return SparseMatrix.diagonal_matrix(d)
    local = (np.ones((3, 3)) + np.eye(3))[None] * (area / 12.0)[:, None, None]
    return _scatter(mesh, local, n_local=3, conn=faces)


def discrete_upwind(K: SparseMatrix) -> SparseMatrix:
    """Remove positive off-diagonal couplings, keeping symmetry and zero row sums.

    Adds the graph Laplacian of the positive off-diagonal entries, which turns
    a P1 stiffness matrix on an obtuse or anisotropic mesh into an M-matrix;
    a no-op when all off-diagonals are already non-positive.
    """
    csr = K.csr.tocoo()
    off = (csr.row != csr.col) & (csr.data > 0)
    if not np.any(off):
        return K
    n = K.n_rows
    pos = sp.coo_matrix((csr.data[off], (csr.row[off], csr.col[off])), shape=(n, n)).tocsr()
    lap = sp.diags(np.asarray(pos.sum(axis=1)).ravel()) - pos
    return SparseMatrix(K.csr + lap)


def reaction_vector(mesh: Mesh, u, ionic, mask=None, mass: SparseMatrix | None = None):
    """Nodal-interpolation reaction load ``M_mask f(u)``.

    ``mask`` selects the elements carrying ionic current (all when ``None``);
    ``mass`` may be a precomputed matrix and then takes precedence.
    """
    from .ionic import f

    u = np.asarray(u, dtype=float)
    if mass is None:
        mass = assemble_mass(mesh, lumped=True, elements=mask)
    return mass @ f(u, ionic)


# ---------------------------------------------------------------- gradients

@lru_cache(maxsize=16)
def gradient_operator(mesh: Mesh):
    """Sparse (3, V, V) operator mapping nodal values to recovered nodal gradients.

    Each vertex gets the volume-weighted average of the constant element
    gradients of its adjacent tets.
    """
    geo = element_geometry(mesh)
    V = mesh.n_vertices
    wsum = np.bincount(mesh.tets.ravel(), weights=np.repeat(geo.volumes, 4), minlength=V)
    rows = np.repeat(mesh.tets, 4, axis=1)          # vertex receiving the average
    cols = np.tile(mesh.tets, (1, 4))               # vertex contributing u
    ops = []
    for a in range(3):
        vals = (geo.volumes[:, None] * geo.grads[:, :, a])            # (E, 4): contributions of u_j
        vals = np.repeat(vals[:, None, :], 4, axis=1).reshape(len(vals), -1)
        m = sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(V, V)).tocsr()
        ops.append(sp.diags(1.0 / wsum) @ m)
    return tuple(ops)


def recover_gradient(mesh: Mesh, u):
    """Nodal gradients of a P1 field; ``u`` may be (V,) or (V, n_frames)."""
    u = np.asarray(u, dtype=float)
    ops = gradient_operator(mesh)
    return np.stack([op @ u for op in ops], axis=1 if u.ndim == 1 else 1)


def element_gradients(mesh: Mesh, u):
    geo = element_geometry(mesh)
    return np.einsum("eia,ei->ea", geo.grads, np.asarray(u)[mesh.tets])


# ---------------------------------------------------------------- helpers

def solve_laplace_dirichlet(mesh: Mesh, fixed, values, K=1.0):
    """Harmonic extension of Dirichlet data given on ``fixed`` nodes."""
    A = assemble_stiffness(mesh, K).csr
    fixed = np.asarray(fixed, dtype=np.int64)
    x = np.zeros(mesh.n_vertices)
    x[fixed] = values
    free = np.setdiff1d(np.arange(mesh.n_vertices), fixed)
    rhs = -(A[free][:, fixed] @ x[fixed])
    sol = cg_solve(SparseMatrix(A[free][:, free]), rhs, SolveOptions(tolerance=1e-12))
    x[free] = sol.x
    return x


def l2_norm(mass: SparseMatrix, v):
    return float(np.sqrt(max(v @ (mass @ v), 0.0)))


def h1_seminorm(stiffness: SparseMatrix, v):
    return float(np.sqrt(max(v @ (stiffness @ v), 0.0)))
