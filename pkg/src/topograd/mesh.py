"""Tetrahedral meshes: generators, refinement, fibre frames and file I/O.

A :class:`Mesh` holds positively oriented P1 tetrahedra, the outward-oriented
boundary triangles with a surface label each, and one orthonormal fibre frame
``(e_f, e_t, e_r)`` per vertex (rows of ``fiber_frames[v]``).

Two generators are provided: a structured box (six Kuhn tetrahedra per hex
cell) and an idealized left ventricle, the region between two coaxial prolate
ellipsoids cut by a basal plane.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

TAGS = ("endocardium", "epicardium", "base", "other")

# local faces opposite vertex 0..3, outward for positively oriented tets
_LOCAL_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray        # (V, 3) cm
    tets: np.ndarray            # (E, 4)
    boundary_faces: np.ndarray  # (F, 3), outward orientation
    face_tags: np.ndarray       # (F,) str labels from TAGS
    fiber_frames: np.ndarray    # (V, 3, 3), rows e_f, e_t, e_r
    meta: dict = field(default_factory=dict)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_tets(self):
        return len(self.tets)

    def volumes(self):
        return tet_volumes(self.vertices, self.tets)

    def centroids(self):
        return self.vertices[self.tets].mean(axis=1)

    def volume(self):
        return float(self.volumes().sum())

    def edges(self):
        """Unique sorted vertex pairs, shape (n_edges, 2)."""
        pairs = self.tets[:, [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]]].reshape(-1, 2)
        return np.unique(np.sort(pairs, axis=1), axis=0)

    def edge_lengths(self):
        e = self.edges()
        return np.linalg.norm(self.vertices[e[:, 1]] - self.vertices[e[:, 0]], axis=1)

    def diameter(self):
        """Largest distance between two vertices (searched over the convex hull)."""
        from scipy.spatial import ConvexHull
        from scipy.spatial.distance import pdist

        pts = self.vertices
        if len(pts) > 4:
            pts = pts[ConvexHull(pts).vertices]
        return float(pdist(pts).max()) if len(pts) > 1 else 0.0

    def mean_edge_length(self):
        return float(self.edge_lengths().mean())

    def face_areas(self, faces=None):
        f = self.boundary_faces if faces is None else faces
        p = self.vertices[f]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    def tag_counts(self):
        labels, counts = np.unique(self.face_tags, return_counts=True)
        return dict(zip(labels.tolist(), counts.tolist()))

    def content_hash(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(self.tets, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(self.boundary_faces, dtype=np.int64).tobytes())
        h.update("|".join(self.face_tags.tolist()).encode())
        return h.hexdigest()[:16]

    def validate(self, atol=1e-12):
        """Raise :class:`MeshError` if any structural invariant fails."""
        vol = self.volumes()
        if np.any(vol <= 0):
            raise MeshError(f"non-positive volume at tet {int(np.flatnonzero(vol <= 0)[0])}")
        faces, _ = extract_boundary(self.tets)
        if not _same_face_sets(faces, self.boundary_faces):
            raise MeshError("boundary_faces do not match the faces owned by a single tet")
        bad = set(np.unique(self.face_tags)) - set(TAGS)
        if bad:
            raise MeshError(f"unknown face tags {sorted(bad)}")
        fr = self.fiber_frames
        gram = np.einsum("vij,vkj->vik", fr, fr)
        if np.abs(gram - np.eye(3)).max() > atol:
            raise MeshError("fibre frames are not orthonormal")
        if n_components(self) != 1:
            raise MeshError("mesh is not connected")
        return self


@dataclass(frozen=True)
class BoundarySubset:
    """A tagged part of the boundary (the measurement surface)."""

    face_indices: np.ndarray
    nodes: np.ndarray
    tags: tuple

    def __post_init__(self):
        if len(self.face_indices) == 0:
            raise MeshError(f"empty boundary subset for tags {self.tags}")


def boundary_subset(mesh: Mesh, tags="all") -> BoundarySubset:
    """Faces carrying any of ``tags`` (a label, a sequence of labels, or ``"all"``)."""
    if tags == "all":
        idx = np.arange(len(mesh.boundary_faces))
        tags = ("all",)
    else:
        tags = (tags,) if isinstance(tags, str) else tuple(tags)
        for t in tags:
            if t not in TAGS:
                raise MeshError(f"unknown tag {t!r}")
        idx = np.flatnonzero(np.isin(mesh.face_tags, tags))
    nodes = np.unique(mesh.boundary_faces[idx]) if len(idx) else np.zeros(0, dtype=np.int64)
    return BoundarySubset(idx, nodes, tags)


def tet_volumes(vertices, tets):
    p = vertices[tets]
    return np.einsum("ij,ij->i", np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]),
                     p[:, 3] - p[:, 0]) / 6.0


def orient_tets(vertices, tets):
    """Swap two vertices of every negatively oriented tet."""
    tets = np.array(tets, dtype=np.int64)
    neg = tet_volumes(vertices, tets) < 0
    tets[neg, 2], tets[neg, 3] = tets[neg, 3].copy(), tets[neg, 2].copy()
    return tets


def extract_boundary(tets):
    """Faces that belong to exactly one tet, with the owning tet index."""
    faces = tets[:, _LOCAL_FACES].reshape(-1, 3)
    owner = np.repeat(np.arange(len(tets)), 4)
    key = np.sort(faces, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    if np.any(counts > 2):
        raise MeshError("non-manifold mesh: a face is shared by more than two tets")
    once = counts[inv] == 1
    return faces[once], owner[once]


def _same_face_sets(a, b):
    if len(a) != len(b):
        return False
    ka = np.unique(np.sort(a, axis=1), axis=0)
    kb = np.unique(np.sort(b, axis=1), axis=0)
    return ka.shape == kb.shape and np.array_equal(ka, kb)


def n_components(mesh: Mesh):
    e = mesh.edges()
    n = mesh.n_vertices
    adj = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    return connected_components(adj, directed=False)[0]


def boundary_edge_valence(mesh: Mesh):
    """How many boundary faces share each boundary edge (2 everywhere if watertight)."""
    f = mesh.boundary_faces
    e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return counts


def canonical_frames(n):
    return np.broadcast_to(np.eye(3), (n, 3, 3)).copy()


def _kuhn_tets(idx):
    """Six Kuhn tetrahedra for every cell of a structured index grid.

    ``idx(di, dj, dk)`` returns, for each cell, the node index of the cell corner
    at offset (di, dj, dk).  Tets with repeated vertices are dropped.
    """
    out = []
    for perm in permutations(range(3)):
        off = [0, 0, 0]
        verts = [idx(*off)]
        for axis in perm:
            off[axis] = 1
            verts.append(idx(*off))
        out.append(np.stack(verts, axis=-1).reshape(-1, 4))
    tets = np.concatenate(out)
    keep = np.array([len(set(t)) == 4 for t in tets.tolist()])
    return tets[keep]


def _finish(vertices, tets, tagger, frames=None, meta=None):
    tets = orient_tets(vertices, tets)
    faces, _ = extract_boundary(tets)
    tags = tagger(faces)
    if frames is None:
        frames = canonical_frames(len(vertices))
    return Mesh(vertices, tets, faces, np.asarray(tags, dtype="<U11"), frames, meta or {})


def mesh_from_arrays(vertices, tets, tag="other", meta=None) -> Mesh:
    """Mesh from raw arrays: tets are re-oriented, every boundary face gets ``tag``."""
    if tag not in TAGS:
        raise MeshError(f"unknown tag {tag!r}")
    vertices = np.asarray(vertices, dtype=float)
    tets = np.asarray(tets, dtype=np.int64)
    return _finish(vertices, tets, lambda faces: [tag] * len(faces), meta=meta)


# ---------------------------------------------------------------- box

def generate_box(nx, ny, nz, lengths=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), tag_planes=None):
    """Structured tetrahedral mesh of an axis-aligned box.

    Parameters
    ----------
    nx, ny, nz : int
        Cells per direction; each hex cell is split into six Kuhn tetrahedra.
    lengths, origin : 3-sequences
        Box extent and lower corner in cm.
    tag_planes : dict, optional
        Maps plane names ``xmin, xmax, ymin, ymax, zmin, zmax`` to a surface
        label.  Faces on other planes are tagged ``other``.
    """
    if min(nx, ny, nz) < 1:
        raise ValueError("cell counts must be >= 1")
    lengths = np.asarray(lengths, dtype=float)
    if np.any(lengths <= 0):
        raise ValueError("box lengths must be positive")
    origin = np.asarray(origin, dtype=float)
    tag_planes = dict(tag_planes or {})
    for name, label in tag_planes.items():
        if name not in ("xmin", "xmax", "ymin", "ymax", "zmin", "zmax") or label not in TAGS:
            raise ValueError(f"bad tag plane {name}={label}")

    xs = [np.linspace(0, lengths[a], n + 1) + origin[a] for a, n in enumerate((nx, ny, nz))]
    X, Y, Z = np.meshgrid(*xs, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    I, J, K = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")

    def idx(di, dj, dk):
        return ((I + di) * (ny + 1) + (J + dj)) * (nz + 1) + (K + dk)

    tets = _kuhn_tets(idx)
    lo, hi = origin, origin + lengths
    tol = 1e-9 * lengths.max()

    def tagger(faces):
        p = vertices[faces]
        tags = np.full(len(faces), "other", dtype="<U11")
        for a, axis in enumerate("xyz"):
            for side, bound in (("min", lo[a]), ("max", hi[a])):
                label = tag_planes.get(axis + side)
                if label:
                    on = np.all(np.abs(p[:, :, a] - bound) <= tol, axis=1)
                    tags[on] = label
        return tags

    return _finish(vertices, tets, tagger, meta={"generator": "box", "cells": (nx, ny, nz),
                                                 "lengths": lengths.tolist(),
                                                 "origin": origin.tolist()})


# ---------------------------------------------------------------- ventricle

@dataclass(frozen=True)
class VentricleGeometry:
    """Two coaxial prolate ellipsoids (semi-axes a, a, c) cut at ``z = z_base``."""

    outer: tuple = (3.2, 3.2, 6.5)
    inner: tuple = (2.4, 2.4, 5.7)
    z_base: float = 1.5

    def check(self):
        ao, bo, co = self.outer
        ai, bi, ci = self.inner
        if ao != bo or ai != bi:
            raise MeshError("only prolate ellipsoids with equal transverse semi-axes are supported")
        if not (ai > 0 and ai < ao and ci < co):
            raise MeshError("degenerate geometry: wall thickness must be positive everywhere")
        if not (-ci < self.z_base < ci):
            raise MeshError("truncation plane must cut both ellipsoids")
        return self

    def semi_axes(self, s):
        """Transverse and axial semi-axes of the surface at transmural depth ``s`` in [0, 1]."""
        a = self.inner[0] + s * (self.outer[0] - self.inner[0])
        c = self.inner[2] + s * (self.outer[2] - self.inner[2])
        return a, c

    def shell_volume(self):
        def cap(a, c):
            zb = self.z_base
            return math.pi * a * a * ((zb + c) - (zb ** 3 + c ** 3) / (3 * c * c))
        return cap(self.outer[0], self.outer[2]) - cap(self.inner[0], self.inner[2])

    def point(self, s, z, phi):
        """Point at transmural depth ``s``, height ``z`` and azimuth ``phi`` (radians)."""
        a, c = self.semi_axes(s)
        r = a * math.sqrt(max(0.0, 1.0 - (z / c) ** 2))
        return (r * math.cos(phi), r * math.sin(phi), float(z))

    def transmural(self, points):
        """Depth ``s`` such that each point lies on the interpolated ellipsoid ``s``."""
        p = np.atleast_2d(points)
        rho2 = p[:, 0] ** 2 + p[:, 1] ** 2
        z2 = p[:, 2] ** 2
        lo = np.full(len(p), -0.5)
        hi = np.full(len(p), 1.5)
        # level function is decreasing in s; 60 bisections reach double precision
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            a, c = self.semi_axes(mid)
            inside = rho2 / a ** 2 + z2 / c ** 2 - 1.0 > 0
            lo = np.where(inside, mid, lo)
            hi = np.where(inside, hi, mid)
        return np.clip(0.5 * (lo + hi), 0.0, 1.0)


def generate_ventricle(resolution=0.5, geometry: VentricleGeometry | None = None,
                       angle_endo=-60.0, angle_epi=60.0):
    """Idealized left-ventricle mesh with endocardium/epicardium/base tags.

    The shell is parametrized by transmural depth ``s``, polar angle and
    azimuth; the structured grid is split into Kuhn tetrahedra and the apex
    ring collapsed to a single node per transmural layer.
    """
    geom = (geometry or VentricleGeometry()).check()
    h = float(resolution)
    if h <= 0:
        raise ValueError("resolution must be positive")
    ai, ci = geom.inner[0], geom.inner[2]
    ao, co = geom.outer[0], geom.outer[2]
    thick = min(ao - ai, co - ci)
    am, cm = geom.semi_axes(0.5)
    tb = math.acos(geom.z_base / cm)
    theta = np.linspace(tb, math.pi, 400)
    arc = np.sum(np.hypot(np.diff(am * np.sin(theta)), np.diff(cm * np.cos(theta))))

    ns = max(1, math.ceil(thick / h - 1e-9))
    nt = max(3, math.ceil(arc / h - 1e-9))
    nphi = max(6, math.ceil(2 * math.pi * am / h - 1e-9))

    ring = (ns + 1) * nt * nphi
    si, ti, ki = np.meshgrid(np.arange(ns + 1), np.arange(nt), np.arange(nphi), indexing="ij")
    si, ti, ki = si.ravel(), ti.ravel(), ki.ravel()
    s_all = np.concatenate([si / ns, np.arange(ns + 1) / ns])
    t_all = np.concatenate([ti / nt, np.ones(ns + 1)])
    phi_all = np.concatenate([2 * math.pi * ki / nphi, np.zeros(ns + 1)])
    a, c = geom.semi_axes(s_all)
    tb_all = np.arccos(geom.z_base / c)
    th = tb_all + t_all * (math.pi - tb_all)
    sin_th = np.where(t_all == 1.0, 0.0, np.sin(th))
    vertices = np.column_stack([a * sin_th * np.cos(phi_all), a * sin_th * np.sin(phi_all),
                                c * np.cos(th)])
    layer = np.concatenate([si, np.arange(ns + 1)])
    polar = np.concatenate([ti, np.full(ns + 1, nt)])

    I, Jt, K = np.meshgrid(np.arange(ns), np.arange(nt), np.arange(nphi), indexing="ij")

    def idx(di, dj, dk):
        i, j, k = I + di, Jt + dj, (K + dk) % nphi
        return np.where(j == nt, ring + i, (i * nt + j) * nphi + k)

    tets = _kuhn_tets(idx)

    def tagger(faces):
        tags = np.full(len(faces), "other", dtype="<U11")
        tags[np.all(layer[faces] == 0, axis=1)] = "endocardium"
        tags[np.all(layer[faces] == ns, axis=1)] = "epicardium"
        tags[np.all(polar[faces] == 0, axis=1)] = "base"
        return tags

    mesh = _finish(vertices, tets, tagger, meta={
        "generator": "ventricle", "resolution": h, "outer": list(geom.outer),
        "inner": list(geom.inner), "z_base": geom.z_base, "grid": (ns, nt, nphi)})
    return assign_fibers(mesh, angle_endo, angle_epi, geometry=geom)


# ---------------------------------------------------------------- fibres

def _circumferential(e_r, axis):
    """Unit ``axis x e_r`` and ``e_r x e_c``; on the long axis (apex) any tangent will do."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    e_c = np.cross(axis, e_r)
    nrm = np.linalg.norm(e_c, axis=1)
    degenerate = nrm < 1e-8
    if np.any(degenerate):
        alt = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e_c[degenerate] = np.cross(alt, e_r[degenerate])
        nrm[degenerate] = np.linalg.norm(e_c[degenerate], axis=1)
    e_c /= nrm[:, None]
    return e_c, np.cross(e_r, e_c)


def _frames_from(e_r, s, angle_endo, angle_epi, axis):
    e_c, e_l = _circumferential(e_r, axis)
    alpha = np.deg2rad(angle_endo + s * (angle_epi - angle_endo))
    e_f = np.cos(alpha)[:, None] * e_c + np.sin(alpha)[:, None] * e_l
    e_f /= np.linalg.norm(e_f, axis=1)[:, None]
    e_t = np.cross(e_r, e_f)
    return np.stack([e_f, e_t, e_r], axis=1)


def transmural_coordinate(mesh: Mesh, geometry: VentricleGeometry | None = None):
    """Transmural depth in [0, 1] (0 on the endocardium) and its unit gradient."""
    if geometry is not None:
        s = geometry.transmural(mesh.vertices)
        a, c = geometry.semi_axes(s)
        g = mesh.vertices / np.column_stack([a * a, a * a, c * c])
    else:
        from .fem import recover_gradient, solve_laplace_dirichlet

        endo = boundary_subset(mesh, "endocardium").nodes
        epi = boundary_subset(mesh, "epicardium").nodes
        fixed = np.concatenate([endo, epi])
        vals = np.concatenate([np.zeros(len(endo)), np.ones(len(epi))])
        s = solve_laplace_dirichlet(mesh, fixed, vals)
        g = recover_gradient(mesh, s)
    g = g / np.linalg.norm(g, axis=1)[:, None]
    return s, g


def assign_fibers(mesh: Mesh, angle_endo=-60.0, angle_epi=60.0,
                  geometry: VentricleGeometry | None = None, axis=(0.0, 0.0, 1.0)) -> Mesh:
    """Rule-based fibre frames rotating linearly through the wall.

    ``e_r`` is the unit gradient of the transmural depth (analytic when the
    ellipsoid ``geometry`` is given, otherwise from a Laplace solve between the
    endocardium and epicardium), ``e_f`` makes the angle
    ``angle_endo + s (angle_epi - angle_endo)`` with the circumferential
    direction ``axis x e_r``, and ``e_t = e_r x e_f``.
    """
    tags = set(np.unique(mesh.face_tags).tolist())
    if not {"endocardium", "epicardium"} <= tags:
        raise MeshError("assign_fibers needs endocardium and epicardium tags")
    s, e_r = transmural_coordinate(mesh, geometry)
    frames = _frames_from(e_r, s, angle_endo, angle_epi, axis)
    meta = dict(mesh.meta, fibers={"angle_endo": angle_endo, "angle_epi": angle_epi,
                                   "rule": "linear-transmural"})
    return Mesh(mesh.vertices, mesh.tets, mesh.boundary_faces, mesh.face_tags, frames, meta)


def fiber_angle(mesh: Mesh, axis=(0.0, 0.0, 1.0)):
    """Angle (degrees) of ``e_f`` from the circumferential direction, per vertex."""
    e_f, e_r = mesh.fiber_frames[:, 0], mesh.fiber_frames[:, 2]
    e_c, e_l = _circumferential(e_r, axis)
    return np.rad2deg(np.arctan2(np.einsum("ij,ij->i", e_f, e_l), np.einsum("ij,ij->i", e_f, e_c)))


def orthonormalize_frames(frames):
    """Gram-Schmidt on (e_f, e_r); e_t rebuilt as e_r x e_f."""
    e_f = frames[:, 0] / np.linalg.norm(frames[:, 0], axis=1)[:, None]
    e_r = frames[:, 2] - np.einsum("ij,ij->i", frames[:, 2], e_f)[:, None] * e_f
    e_r /= np.linalg.norm(e_r, axis=1)[:, None]
    return np.stack([e_f, np.cross(e_r, e_f), e_r], axis=1)


# ---------------------------------------------------------------- refinement

def refine_uniform(mesh: Mesh) -> Mesh:
    """Split every tet into eight through its edge midpoints.

    Original vertices keep their indices; midpoints are appended.  Boundary
    faces split 1 -> 4 and inherit their parent's tag.
    """
    edges = mesh.edges()
    V = mesh.n_vertices
    n_e = len(edges)
    lookup = sp.coo_matrix((np.arange(n_e) + V, (edges[:, 0], edges[:, 1])), shape=(V, V)).tocsr()

    def mid(a, b):
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        return np.asarray(lookup[lo, hi]).ravel().astype(np.int64)

    verts = np.vstack([mesh.vertices, 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])])
    fr = mesh.fiber_frames
    frames = np.concatenate([fr, orthonormalize_frames(0.5 * (fr[edges[:, 0]] + fr[edges[:, 1]]))])

    t = mesh.tets
    a, b, c, d = t.T
    ab, ac, ad, bc, bd, cd = mid(a, b), mid(a, c), mid(a, d), mid(b, c), mid(b, d), mid(c, d)
    corners = [np.column_stack(x) for x in ((a, ab, ac, ad), (ab, b, bc, bd), (ac, bc, c, cd),
                                             (ad, bd, cd, d))]
    # inner octahedron: split along its shortest diagonal
    diag = np.stack([np.linalg.norm(verts[ab] - verts[cd], axis=1),
                     np.linalg.norm(verts[ac] - verts[bd], axis=1),
                     np.linalg.norm(verts[ad] - verts[bc], axis=1)], axis=1).argmin(axis=1)
    octa = []
    for k, (p, q, ring) in enumerate((
            (ab, cd, (ac, bc, bd, ad)),
            (ac, bd, (ab, bc, cd, ad)),
            (ad, bc, (ab, ac, cd, bd)))):
        sel = diag == k
        r = [x[sel] for x in ring]
        pp, qq = p[sel], q[sel]
        for i in range(4):
            octa.append(np.column_stack([pp, qq, r[i], r[(i + 1) % 4]]))
    tets = orient_tets(verts, np.concatenate(corners + octa))

    f = mesh.boundary_faces
    fa, fb, fc = f.T
    mab, mbc, mca = mid(fa, fb), mid(fb, fc), mid(fc, fa)
    faces = np.concatenate([np.column_stack(x) for x in (
        (fa, mab, mca), (mab, fb, mbc), (mca, mbc, fc), (mab, mbc, mca))])
    tags = np.tile(mesh.face_tags, 4)
    meta = dict(mesh.meta, refined=mesh.meta.get("refined", 0) + 1)
    return Mesh(verts, tets, faces, tags, frames, meta)


# ---------------------------------------------------------------- file I/O

_HEADER = "TOPOGRAD-MESH 1"


def write_mesh(path, mesh: Mesh):
    """Write the documented ASCII mesh format (see README)."""
    lines = [_HEADER, f"vertices {mesh.n_vertices}"]
    lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines.append(f"tets {mesh.n_tets}")
    lines += [" ".join(map(str, t)) for t in mesh.tets.tolist()]
    lines.append(f"faces {len(mesh.boundary_faces)}")
    lines += [f"{a} {b} {c} {tag}" for (a, b, c), tag in zip(mesh.boundary_faces.tolist(),
                                                               mesh.face_tags)]
    lines.append(f"fibers {mesh.n_vertices}")
    lines += [" ".join(f"{v:.17g}" for v in fr) for fr in mesh.fiber_frames.reshape(-1, 9)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    """Read the ASCII mesh format written by :func:`write_mesh`."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines or lines[0] != _HEADER:
        raise MeshError(f"{path}: missing '{_HEADER}' header")
    pos = 1
    blocks = {}
    while pos < len(lines):
        name, _, count = lines[pos].partition(" ")
        try:
            n = int(count)
        except ValueError:
            raise MeshError(f"{path}: line {pos + 1}: expected '<block> <count>'") from None
        blocks[name] = lines[pos + 1:pos + 1 + n]
        if len(blocks[name]) != n:
            raise MeshError(f"{path}: block {name!r} truncated")
        pos += n + 1
    for req in ("vertices", "tets", "faces"):
        if req not in blocks:
            raise MeshError(f"{path}: missing block {req!r}")
    verts = np.array([[float(v) for v in ln.split()] for ln in blocks["vertices"]]).reshape(-1, 3)
    tets = np.array([[int(v) for v in ln.split()] for ln in blocks["tets"]], dtype=np.int64).reshape(-1, 4)
    rows = [ln.split() for ln in blocks["faces"]]
    faces = np.array([[int(v) for v in r[:3]] for r in rows], dtype=np.int64).reshape(-1, 3)
    tags = np.array([r[3] for r in rows], dtype="<U11")
    if "fibers" in blocks:
        frames = np.array([[float(v) for v in ln.split()] for ln in blocks["fibers"]]).reshape(-1, 3, 3)
    else:
        frames = canonical_frames(len(verts))
    return Mesh(verts, tets, faces, tags, frames, {"source": str(path)})


def read_gmsh_v2(path, tag_map=None) -> Mesh:
    """Read an ASCII Gmsh v2 ``.msh`` file.

    Tetrahedra (type 4) form the volume; triangles (type 2) label boundary
    faces through their physical tag, looked up first in ``tag_map``
    (``{physical_id: label}``) and then by ``$PhysicalNames``.  Boundary faces
    without a labelled triangle are tagged ``other``.
    """
    text = Path(path).read_text().split("\n")
    sections = {}
    i = 0
    while i < len(text):
        line = text[i].strip()
        if line.startswith("$") and not line.startswith("$End"):
            name = line[1:]
            j = i + 1
            while not text[j].strip().startswith("$End" + name):
                j += 1
            sections[name] = [ln.strip() for ln in text[i + 1:j]]
            i = j
        i += 1
    fmt = sections.get("MeshFormat", ["2.2 0 8"])[0].split()
    if not fmt[0].startswith("2") or fmt[1] != "0":
        raise MeshError(f"{path}: only ASCII Gmsh v2 is supported (got {' '.join(fmt)})")
    names = {}
    for ln in sections.get("PhysicalNames", [])[1:]:
        dim, pid, name = ln.split(maxsplit=2)
        names[int(pid)] = name.strip('"')
    mapping = {pid: name for pid, name in names.items() if name in TAGS}
    mapping.update(tag_map or {})

    node_lines = sections["Nodes"][1:]
    ids = np.array([int(ln.split()[0]) for ln in node_lines])
    verts = np.array([[float(v) for v in ln.split()[1:4]] for ln in node_lines])
    remap = {nid: k for k, nid in enumerate(ids.tolist())}
    tets, tris, tri_tags = [], [], []
    for ln in sections["Elements"][1:]:
        parts = [int(v) for v in ln.split()]
        etype, ntags = parts[1], parts[2]
        phys = parts[3] if ntags > 0 else 0
        nodes = [remap[v] for v in parts[3 + ntags:]]
        if etype == 4:
            tets.append(nodes)
        elif etype == 2:
            tris.append(sorted(nodes))
            tri_tags.append(mapping.get(phys, "other"))
    if not tets:
        raise MeshError(f"{path}: no tetrahedra")
    used = np.unique(np.array(tets))
    # drop nodes not used by any tet (e.g. geometry points)
    new_index = -np.ones(len(verts), dtype=np.int64)
    new_index[used] = np.arange(len(used))
    verts = verts[used]
    tets = new_index[np.array(tets, dtype=np.int64)]
    tri_lookup = {tuple(new_index[t]): tag for t, tag in zip(tris, tri_tags)}

    def tagger(faces):
        return [tri_lookup.get(tuple(sorted(f)), "other") for f in faces.tolist()]

    return _finish(verts, tets, tagger, meta={"source": str(path)})


def load_mesh(path) -> Mesh:
    p = Path(path)
    return read_gmsh_v2(p) if p.suffix == ".msh" else read_mesh(p)


def locate_point(mesh: Mesh, point, tol=1e-10):
    """Containing tet and barycentric coordinates of ``point``.

    Falls back to the tet with the least negative barycentric coordinate when
    the point lies (numerically) outside the mesh.
    """
    p = mesh.vertices[mesh.tets]
    jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=2)
    lam = np.linalg.solve(jac, (np.asarray(point, dtype=float) - p[:, 0])[..., None])[..., 0]
    bary = np.column_stack([1.0 - lam.sum(axis=1), lam])
    worst = bary.min(axis=1)
    k = int(np.argmax(worst))
    if worst[k] < -tol:
        b = np.clip(bary[k], 0.0, None)
        return k, b / b.sum()
    return k, bary[k]


def prolongate(coarse: Mesh, values):
    """P1 interpolation of coarse nodal values onto ``refine_uniform(coarse)``."""
    values = np.asarray(values, dtype=float)
    e = coarse.edges()
    return np.concatenate([values, 0.5 * (values[e[:, 0]] + values[e[:, 1]])])
