import numpy as np
import pytest

from m4gn.mesh import make_mesh


def path_mesh(n: int, spacing: float = 1.0):
    """n nodes on a line joined by 2-node cells."""
    pos = np.stack([np.arange(n) * spacing, np.zeros(n)], axis=1)
    return make_mesh(pos, [(i, i + 1) for i in range(n - 1)])


def grid_mesh(nx: int, ny: int, h: float = 1.0):
    """Structured triangle grid with nx x ny vertices."""
    xs, ys = np.meshgrid(np.arange(nx) * h, np.arange(ny) * h, indexing="ij")
    pos = np.stack([xs.ravel(), ys.ravel()], axis=1)
    idx = lambda i, j: i * ny + j  # noqa: E731
    cells = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            cells += [(idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)),
                      (idx(i, j), idx(i + 1, j + 1), idx(i, j + 1))]
    return make_mesh(pos, cells)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
