import numpy as np
import pytest

from topograd.mesh import generate_box, generate_ventricle, mesh_from_arrays

REF_TET = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


@pytest.fixture
def ref_tet():
    return mesh_from_arrays(REF_TET, [[0, 1, 2, 3]], tag="endocardium")


@pytest.fixture(scope="session")
def small_box():
    return generate_box(4, 4, 4, tag_planes={"xmin": "endocardium", "xmax": "epicardium"})


@pytest.fixture(scope="session")
def coarse_ventricle():
    return generate_ventricle(0.8)


@pytest.fixture(scope="session")
def desk_ventricle():
    return generate_ventricle(0.5)
