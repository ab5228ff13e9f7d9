import numpy as np
import pytest

from sphereproxy.mesh import TriangleMesh

# Unit cube centered at the origin, CCW outward winding.
_CUBE_V = np.array(
    [
        [-0.5, -0.5, -0.5],
        [+0.5, -0.5, -0.5],
        [+0.5, +0.5, -0.5],
        [-0.5, +0.5, -0.5],
        [-0.5, -0.5, +0.5],
        [+0.5, -0.5, +0.5],
        [+0.5, +0.5, +0.5],
        [-0.5, +0.5, +0.5],
    ]
)
_CUBE_F = np.array(
    [
        [0, 2, 1], [0, 3, 2],  # z-
        [4, 5, 6], [4, 6, 7],  # z+
        [0, 1, 5], [0, 5, 4],  # y-
        [2, 3, 7], [2, 7, 6],  # y+
        [1, 2, 6], [1, 6, 5],  # x+
        [0, 4, 7], [0, 7, 3],  # x-
    ]
)


def cube_mesh(edge: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    return TriangleMesh(_CUBE_V * edge + np.asarray(center), _CUBE_F)


@pytest.fixture
def cube() -> TriangleMesh:
    return cube_mesh()


@pytest.fixture(scope="session")
def icosphere():
    from sphereproxy.assets import gen_icosphere

    return gen_icosphere(radius=1.0, subdivisions=3)


@pytest.fixture(scope="session")
def capsule_man():
    from sphereproxy.assets import gen_capsule_man

    return gen_capsule_man(resolution=40)
