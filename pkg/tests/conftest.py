import numpy as np
import pytest

from perfield.grid import dense_grid, make_background


def random_rotation(rng):
    """Uniform random rotation via QR decomposition with sign fix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_grid(rng, resolution=(8, 8, 8), sigma_range=(0.3, 2.0), sh_scale=0.7,
                bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))):
    g = dense_grid(resolution, bounds[0], bounds[1])
    g.density[:] = rng.uniform(*sigma_range, g.slot_count)
    g.sh[:] = rng.normal(0.0, sh_scale, (g.slot_count, 27))
    return g


def random_background(rng, grid, n_layers=3, layer_resolution=6):
    bg = make_background(grid, n_layers=n_layers, layer_resolution=layer_resolution)
    bg.texels[..., :3] = rng.normal(0.0, 0.8, bg.texels[..., :3].shape)
    bg.texels[..., 3] = rng.uniform(0.2, 1.0, bg.texels[..., 3].shape)
    return bg


def random_dirs(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
