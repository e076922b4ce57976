"""The compiled kernels and the pure-Python fallback must agree bit for bit."""

import numpy as np
import pytest

from carpose import _kernels_py, kernels
from carpose.geometry import pose_from_euler
from carpose.pnp import CorrespondenceSet, epnp
from carpose.raster import fill_triangles, render_ids, render_silhouette

compiled = pytest.mark.skipif("compiled" not in kernels.available_backends(),
                              reason="compiled extension not built")


@pytest.fixture
def restore_backend():
    before = kernels.backend()
    yield
    kernels.set_backend(before)


def test_backend_selection(restore_backend):
    assert kernels.backend() in kernels.available_backends()
    kernels.set_backend("python")
    assert kernels.active() is _kernels_py
    with pytest.raises(ValueError):
        kernels.set_backend("fortran")


@compiled
def test_fill_triangles_bitwise(restore_backend):
    rng = np.random.default_rng(0)
    xy = rng.uniform(-10, 74, size=(60, 2))
    tris = rng.integers(0, 60, size=(40, 3)).astype(np.int32)
    out = {}
    for name in ("python", "compiled"):
        kernels.set_backend(name)
        out[name] = fill_triangles(xy, tris, 64, 64)
    np.testing.assert_array_equal(out["python"], out["compiled"])


@compiled
def test_render_bitwise(restore_backend, K, library):
    items = [(i, m, pose_from_euler(0, 0, 0.7 * i, (-4 + 2.5 * i, 0.775, 10 + 3 * i)))
             for i, m in enumerate(library)]
    out = {}
    for name in ("python", "compiled"):
        kernels.set_backend(name)
        ids, depth = render_ids(K, items)
        out[name] = (ids, depth, render_silhouette(K, library[0], items[0][2]))
    for a, b in zip(out["python"], out["compiled"]):
        np.testing.assert_array_equal(a, b)


@compiled
@pytest.mark.parametrize("seed", range(25))
def test_epnp_bitwise(restore_backend, K, seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-2, 2, size=(8, 3))
    pose = pose_from_euler(0.0, 0.1, rng.uniform(-3, 3), (rng.uniform(-2, 2), 0.8, rng.uniform(6, 60)))
    uv = (pts @ pose.R.T + pose.t)
    uv = np.column_stack([K.fx * uv[:, 0] / uv[:, 2] + K.ux, K.fy * uv[:, 1] / uv[:, 2] + K.uy])
    uv += rng.normal(0, 1.0, uv.shape)
    corrs = CorrespondenceSet(np.arange(8), uv, pts)
    sols = {}
    for name in ("python", "compiled"):
        kernels.set_backend(name)
        sols[name] = epnp(corrs, K)
    assert sols["python"].pose == sols["compiled"].pose


@compiled
def test_gauss_newton_bitwise():
    from carpose import _kernels
    rng = np.random.default_rng(5)
    for n in (1, 2, 3, 4):
        pairs = n * (n - 1) // 2 if n > 1 else 1
        pairs = max(pairs, n)
        dv = rng.normal(size=(6, n, 3))
        rho = rng.uniform(0.5, 2.0, 6)
        a = rng.normal(size=n)
        b = a.copy()
        ia = _kernels_py.gauss_newton_betas(a, dv, rho, 10, 1e-12)
        ib = _kernels.gauss_newton_betas(b, dv, rho, 10, 1e-12)
        assert ia == ib
        np.testing.assert_array_equal(a, b)
