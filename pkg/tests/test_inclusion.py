import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from topograd.fem import ConductivityField
from topograd.inclusion import (InclusionSpec, InclusionWarning, classify_elements,
                                is_well_separated, perturbed_conductivity, polarization_sphere)
from topograd.mesh import generate_box, refine_uniform


def test_tiny_inclusion_picks_one_element(small_box):
    k = 17
    c = small_box.centroids()[k]
    el = classify_elements(small_box, InclusionSpec(c, 1e-6, 0.1))
    assert el.elements.tolist() == [k]
    assert el.volume == pytest.approx(small_box.volumes()[k])


def test_discrete_volume_converges():
    inc = InclusionSpec((0.5, 0.5, 0.5), 0.3, 0.1)
    m = generate_box(6, 6, 6)
    assert len(classify_elements(m, inc)) >= 100
    for _ in range(2):
        m = refine_uniform(m)
    el = classify_elements(m, inc)
    assert abs(el.volume / inc.volume - 1) <= 0.10


def test_outside_inclusion_warns(small_box):
    with pytest.warns(InclusionWarning):
        el = classify_elements(small_box, InclusionSpec((5.0, 5.0, 5.0), 0.1, 0.1))
    assert len(el) == 0 and el.volume == 0.0


def test_spec_validation():
    with pytest.raises(ValueError):
        InclusionSpec((0, 0, 0), 0.0, 0.1)
    with pytest.raises(ValueError):
        InclusionSpec((0, 0, 0), 0.1, -1.0)
    with pytest.raises(ValueError):
        InclusionSpec((0, 0), 0.1, 0.1)


def test_perturbed_conductivity_cases(small_box):
    K0 = ConductivityField.scalar(small_box, 1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", InclusionWarning)
        empty = classify_elements(small_box, InclusionSpec((9, 9, 9), 0.1, 0.1))
    assert perturbed_conductivity(K0, empty, 0.1) is K0
    same = perturbed_conductivity(K0, np.arange(10), 1.0)
    assert np.array_equal(same.tensors, K0.tensors)
    K = perturbed_conductivity(K0, np.array([3]), 0.1)
    assert np.array_equal(K.tensors[3], 0.1 * np.eye(3))
    others = np.delete(np.arange(small_box.n_tets), 3)
    assert np.array_equal(K.tensors[others], K0.tensors[others])


def test_anisotropic_scaling(coarse_ventricle):
    K0 = ConductivityField.monodomain(coarse_ventricle)
    K = perturbed_conductivity(K0, np.array([0, 5]), 0.12)
    assert np.allclose(K.tensors[[0, 5]], 0.1 * K0.tensors[[0, 5]])


def test_polarization_examples():
    assert np.array_equal(polarization_sphere(1.0, 1.0), np.eye(3))
    assert np.allclose(polarization_sphere(2.0, 1.0), 1.2 * np.eye(3), atol=1e-15)


@given(st.floats(0.01, 100), st.floats(0.01, 100))
def test_polarization_spd(k0, k1):
    M = polarization_sphere(k0, k1)
    assert np.array_equal(M, M.T)
    assert np.linalg.eigvalsh(M).min() > 0


def test_well_separated(small_box):
    assert is_well_separated(small_box, InclusionSpec((0.5, 0.5, 0.5), 0.1, 0.1), 0.2)
    assert not is_well_separated(small_box, InclusionSpec((0.2, 0.5, 0.5), 0.1, 0.1), 0.2)
