"""Spherical inclusions: element classification, perturbed conductivity, polarization tensor."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .fem import ConductivityField
from .mesh import Mesh


class InclusionWarning(UserWarning):
    pass


@dataclass(frozen=True)
class InclusionSpec:
    center: tuple
    eps: float
    k1: float
    shape: str = "sphere"

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if len(self.center) != 3:
            raise ValueError("inclusion center must be a 3D point")
        if not self.eps > 0:
            raise ValueError("inclusion radius must be positive")
        if not self.k1 > 0:
            raise ValueError("inner conductivity must be positive")
        if self.shape != "sphere":
            raise ValueError("only spherical inclusions are supported")

    @property
    def volume(self):
        return 4.0 / 3.0 * math.pi * self.eps ** 3

    def moved(self, center):
        return InclusionSpec(tuple(center), self.eps, self.k1, self.shape)

    def resized(self, eps):
        return InclusionSpec(self.center, eps, self.k1, self.shape)


@dataclass(frozen=True)
class ElementSet:
    """Elements marked as inclusion, with their discrete volume."""

    elements: np.ndarray
    volume: float
    warning: str | None = None

    def __len__(self):
        return len(self.elements)

    def mask(self, n_tets):
        m = np.zeros(n_tets, dtype=bool)
        m[self.elements] = True
        return m


def classify_elements(mesh: Mesh, inc: InclusionSpec) -> ElementSet:
    """Elements whose centroid lies in the closed ball ``B(center, eps)``."""
    d = np.linalg.norm(mesh.centroids() - np.asarray(inc.center), axis=1)
    el = np.flatnonzero(d <= inc.eps)
    vol = float(mesh.volumes()[el].sum())
    msg = None
    if len(el) == 0:
        msg = f"inclusion at {inc.center} with radius {inc.eps} contains no element centroid"
        warnings.warn(msg, InclusionWarning, stacklevel=2)
    return ElementSet(el, vol, msg)


def boundary_distance(mesh: Mesh, points):
    """Distance from points to the nearest boundary vertex (a mesh-level proxy)."""
    from scipy.spatial import cKDTree

    bnodes = np.unique(mesh.boundary_faces)
    tree = cKDTree(mesh.vertices[bnodes])
    return tree.query(np.atleast_2d(points))[0]


def is_well_separated(mesh: Mesh, inc: InclusionSpec, d0: float) -> bool:
    return bool(boundary_distance(mesh, inc.center)[0] - inc.eps >= d0)


def perturbed_conductivity(K0: ConductivityField, elements, k1: float) -> ConductivityField:
    """Background tensors outside ``elements``; inside, ``k1 I`` (isotropic) or ``k1/k_ref K0``."""
    el = elements.elements if isinstance(elements, ElementSet) else np.asarray(elements, dtype=np.int64)
    if len(el) == 0:
        return K0
    t = K0.tensors.copy()
    if K0.isotropic:
        t[el] = k1 * np.eye(3)
    else:
        t[el] *= k1 / K0.reference
    return ConductivityField(t, K0.reference, K0.isotropic)


def polarization_sphere(k0: float, k1: float) -> np.ndarray:
    """Polarization tensor ``3 k0 / (2 k0 + k1) I`` of a ball in an isotropic background."""
    if not (k0 > 0 and k1 > 0):
        raise ValueError("conductivities must be positive")
    return 3.0 * k0 / (2.0 * k0 + k1) * np.eye(3)
