"""The numba and numpy kernel implementations must be interchangeable."""

import numpy as np
import pytest

from hoitg import kernels

IMPLS = kernels.implementations()
BACKENDS = [name for name, table in IMPLS.items() if table is not None]


def test_backend_consistency():
    assert kernels.BACKEND in ("numpy", "numba")
    assert (kernels.BACKEND == "numba") == kernels.HAS_NUMBA


@pytest.mark.skipif(IMPLS["numba"] is None, reason="numba unavailable")
class TestBackendsAgree:
    def setup_method(self):
        self.rng = np.random.default_rng(7)

    def test_pairwise_and_min_distances(self):
        a = self.rng.normal(size=(40, 3))
        b = self.rng.normal(size=(25, 3))
        d_np = IMPLS["numpy"]["pairwise_distances"](a, b)
        d_nb = IMPLS["numba"]["pairwise_distances"](a, b)
        assert np.allclose(d_np, d_nb, rtol=1e-12, atol=1e-13)
        m_np = IMPLS["numpy"]["min_distances"](a, b)
        m_nb = IMPLS["numba"]["min_distances"](a, b)
        assert np.allclose(m_np, m_nb, rtol=1e-12, atol=1e-13)
        assert abs(
            IMPLS["numpy"]["nn_mean_distance"](a, b) - IMPLS["numba"]["nn_mean_distance"](a, b)
        ) < 1e-12

    def test_fps_identical_picks(self):
        pts = self.rng.normal(size=(60, 3))
        for m, start in [(1, 0), (10, 3), (60, 59)]:
            assert np.array_equal(
                IMPLS["numpy"]["fps"](pts, m, start), IMPLS["numba"]["fps"](pts, m, start)
            )

    def test_gelu(self):
        x = self.rng.normal(size=257) * 3
        assert np.allclose(
            IMPLS["numpy"]["gelu_forward"](x), IMPLS["numba"]["gelu_forward"](x), atol=1e-14
        )
        assert np.allclose(
            IMPLS["numpy"]["gelu_grad"](x), IMPLS["numba"]["gelu_grad"](x), atol=1e-14
        )

    def test_bilinear(self):
        grid = self.rng.normal(size=(6, 9, 7))
        u = self.rng.uniform(-1, 8, size=30)
        v = self.rng.uniform(-1, 10, size=30)
        dout = self.rng.normal(size=(30, 6))
        f_np = IMPLS["numpy"]["bilinear_forward"](grid, u, v)
        f_nb = IMPLS["numba"]["bilinear_forward"](grid, u, v)
        assert np.allclose(f_np, f_nb, atol=1e-13)
        b_np = IMPLS["numpy"]["bilinear_backward"](grid, u, v, dout)
        b_nb = IMPLS["numba"]["bilinear_backward"](grid, u, v, dout)
        for x, y in zip(b_np, b_nb):
            assert np.allclose(x, y, atol=1e-12)

    def test_im2col_roundtrip(self):
        x = self.rng.normal(size=(4, 12, 11))
        cols_np = IMPLS["numpy"]["im2col"](x, 3, 3, 2, 2, 5, 5)
        cols_nb = IMPLS["numba"]["im2col"](x, 3, 3, 2, 2, 5, 5)
        assert np.array_equal(cols_np, cols_nb)
        back_np = IMPLS["numpy"]["col2im"](cols_np, 4, 12, 11, 3, 3, 2, 2, 5, 5)
        back_nb = IMPLS["numba"]["col2im"](cols_nb, 4, 12, 11, 3, 3, 2, 2, 5, 5)
        assert np.allclose(back_np, back_nb, atol=1e-13)

    def test_splat(self):
        px = self.rng.uniform(-2, 18, size=50)
        py = self.rng.uniform(-2, 18, size=50)
        z = self.rng.normal(size=50)
        m_np, d_np = IMPLS["numpy"]["splat"](px, py, z, 16, 16)
        m_nb, d_nb = IMPLS["numba"]["splat"](px, py, z, 16, 16)
        assert np.array_equal(m_np, m_nb)
        assert np.array_equal(d_np, d_nb)


@pytest.mark.parametrize("backend", BACKENDS)
def test_gelu_matches_reference(backend):
    # independent scalar oracle: x * Phi(x) evaluated via the error function
    import math

    xs = np.array([-3.0, -1.0, -0.1, 0.0, 0.5, 1.0, 4.0])
    expected = np.array([x * 0.5 * (1 + math.erf(x / math.sqrt(2))) for x in xs])
    got = IMPLS[backend]["gelu_forward"](xs)
    assert np.allclose(got, expected, atol=1e-12)
