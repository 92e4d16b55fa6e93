import numpy as np
import pytest

from conftest import gradcheck
from hnet import tensor as T
from hnet.kernels import numpy_impl
from hnet.layers import ssm_scan
from hnet.chunking import smooth
from hnet.tensor import DiffTensor

try:
    from hnet.kernels import numba_impl
except ImportError:
    numba_impl = None

needs_numba = pytest.mark.skipif(numba_impl is None, reason="numba not available")


def _scan_inputs(rng, L=17, H=3, P=6, N=5):
    u = rng.uniform(-1, 1, (L, H, P)).astype(np.float32)
    a = rng.uniform(0.05, 0.97, (L, H)).astype(np.float32)
    b = rng.uniform(-1, 1, (L, N)).astype(np.float32)
    c = rng.uniform(-1, 1, (L, N)).astype(np.float32)
    s0 = rng.uniform(-0.5, 0.5, (H, N, P)).astype(np.float32)
    return u, a, b, c, s0


@needs_numba
def test_ssm_scan_backend_parity(rng):
    u, a, b, c, s0 = _scan_inputs(rng)
    y1, s1 = numpy_impl.ssm_scan_fwd(u, a, b, c, s0)
    y2, s2 = numba_impl.ssm_scan_fwd(u, a, b, c, s0)
    np.testing.assert_allclose(y1, y2, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(s1, s2, rtol=1e-5, atol=1e-6)
    g = rng.uniform(-1, 1, u.shape).astype(np.float32)
    o1 = numpy_impl.ssm_scan_bwd(g, u, a, b, c, s0, s1)
    o2 = numba_impl.ssm_scan_bwd(g, u, a, b, c, s0, s2)
    for x1, x2 in zip(o1, o2):
        np.testing.assert_allclose(x1, x2, rtol=1e-4, atol=1e-5)


@needs_numba
def test_ema_scan_backend_parity(rng):
    z = rng.uniform(-1, 1, (11, 7)).astype(np.float32)
    p = rng.uniform(0, 1, 11).astype(np.float32)
    z0 = rng.uniform(-1, 1, 7).astype(np.float32)
    zb1 = numpy_impl.ema_scan_fwd(z, p, z0)
    zb2 = numba_impl.ema_scan_fwd(z, p, z0)
    np.testing.assert_allclose(zb1, zb2, rtol=1e-6, atol=1e-7)
    g = rng.uniform(-1, 1, z.shape).astype(np.float32)
    o1 = numpy_impl.ema_scan_bwd(g, z, p, z0, zb1)
    o2 = numba_impl.ema_scan_bwd(g, z, p, z0, zb2)
    for x1, x2 in zip(o1, o2):
        np.testing.assert_allclose(x1, x2, rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("impl_name", ["numpy", "numba"])
def test_step_kernel_matches_scan_bitwise(impl_name, rng):
    impl = numpy_impl if impl_name == "numpy" else numba_impl
    if impl is None:
        pytest.skip("numba not available")
    u, a, b, c, s0 = _scan_inputs(rng)
    y, _ = impl.ssm_scan_fwd(u, a, b, c, s0)
    s = s0.copy()
    stepped = np.stack([impl.ssm_step_fwd(u[t], a[t], b[t], c[t], s) for t in range(len(u))])
    assert (y == stepped).all()


def test_ssm_scan_gradients_vs_fd(rng):
    u, a, b, c, s0 = _scan_inputs(rng, L=9, H=2, P=4, N=3)
    ut, at, bt, ct = (DiffTensor(x) for x in (u, a, b, c))
    w = DiffTensor(rng.uniform(-1, 1, u.shape))

    def make(target):
        def f(t):
            return T.sum_(T.mul(ssm_scan(ut, at, bt, ct, s0), w))

        return f

    for t in (ut, at, bt, ct):
        gradcheck(make(t), t, floor=0.3)


def test_ema_gradients_vs_fd(rng):
    z = DiffTensor(rng.uniform(-1, 1, (8, 5)))
    p = DiffTensor(rng.uniform(0.05, 0.95, 8))
    z0 = rng.uniform(-1, 1, 5).astype(np.float32)
    w = DiffTensor(rng.uniform(-1, 1, (8, 5)))

    def f(t):
        return T.sum_(T.mul(smooth(z, p, z0), w))

    gradcheck(f, z, floor=0.3)
    gradcheck(f, p, floor=0.3)


def test_scan_state_continuation(rng):
    # scanning [first half] then [second half from carried state] == full scan
    u, a, b, c, s0 = _scan_inputs(rng, L=12)
    y_full, states = numpy_impl.ssm_scan_fwd(u, a, b, c, s0)
    y1, st1 = numpy_impl.ssm_scan_fwd(u[:5], a[:5], b[:5], c[:5], s0)
    y2, _ = numpy_impl.ssm_scan_fwd(u[5:], a[5:], b[5:], c[5:], st1[-1])
    np.testing.assert_array_equal(np.concatenate([y1, y2]), y_full)


def test_backend_env_flag_selection():
    import hnet.kernels as K

    assert K.BACKEND in ("numba", "numpy")
