import numpy as np
import pytest

from ddconvect.benchmarks import example1, example2, example3
from ddconvect.fespace import FESystem
from ddconvect.mesh import build_mesh, mesh_from_arrays, selector_horizontal_sides


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def two_triangles():
    """Unit square cut along its diagonal; temperature Dirichlet on y = 0, 1."""
    verts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]
    tris = [[0, 1, 2], [0, 2, 3]]
    return mesh_from_arrays(verts, tris, dirichlet_selector=selector_horizontal_sides)


@pytest.fixture
def skewed_pair():
    """Two non-right triangles sharing an interior edge."""
    verts = [[0.0, 0.0], [1.3, 0.2], [0.9, 1.1], [-0.2, 0.8]]
    tris = [[0, 1, 2], [0, 2, 3]]
    return mesh_from_arrays(verts, tris, dirichlet_selector=lambda m: m[:, 1] < 0.5)


@pytest.fixture(params=[1, 2, 3], ids=["ex1", "ex2", "ex3"])
def bench(request):
    return {1: example1, 2: example2, 3: example3}[request.param]()


def small_system(bench, n=2, k=0):
    return FESystem(build_mesh(bench.domain(n)), k)
