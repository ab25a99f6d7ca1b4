import numpy as np
import pytest

from perfusim.meshgen import voxel_tet_mesh
from perfusim.models import BinaryMask, TetMesh


def box_mesh(nx, ny=None, nz=None, spacing=(1.0, 1.0, 1.0)) -> TetMesh:
    'Kuhn mesh of a full nx x ny x nz block of voxels'

    ny = nx if ny is None else ny
    nz = nx if nz is None else nz
    return voxel_tet_mesh(BinaryMask(values=np.ones((nx, ny, nz), dtype=bool), spacing=spacing))


@pytest.fixture
def single_tet():
    'One positively oriented tetrahedron on the unit axes'

    return TetMesh(
        vertices=[[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]],
        tets=[[0, 1, 2, 3]],
    )


@pytest.fixture
def regular_tet():
    'Regular tetrahedron with edge length 2 sqrt(2)'

    return TetMesh(
        vertices=[[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]],
        tets=[[0, 1, 3, 2]],
    )


@pytest.fixture
def box3():
    return box_mesh(3)


@pytest.fixture
def box4():
    return box_mesh(4)
