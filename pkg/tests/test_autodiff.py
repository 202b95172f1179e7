import numpy as np
import pytest

from precodelab import autodiff as ad
from precodelab.autodiff import Tensor


def fd_grad(fn, x0, h=1e-6):
    """Central finite differences of a scalar function of one ndarray."""
    x0 = np.asarray(x0, float)
    g = np.zeros_like(x0)
    flat = x0.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        gf[i] = (fn(xp.reshape(x0.shape)) - fn(xm.reshape(x0.shape))) / (2 * h)
    return g


def check_grad(build, x0, rtol=1e-6):
    """build(Tensor) -> scalar Tensor; compares autodiff grad to FD."""
    t = Tensor(x0, requires_grad=True)
    loss = build(t)
    loss.backward()
    got = t.grad
    want = fd_grad(lambda x: float(build(Tensor(x)).data), x0)
    scale = max(1e-8, float(np.max(np.abs(want))))
    assert np.max(np.abs(got - want)) <= rtol * scale, (
        f"max diff {np.max(np.abs(got - want))} vs scale {scale}"
    )


class TestElementwise:
    def test_arith_chain(self):
        rng = np.random.default_rng(0)
        x0 = rng.standard_normal((3, 4))
        other = rng.standard_normal((3, 4))

        def f(t):
            return ((t * 2.0 + Tensor(other)) / (t ** 2 + 3.0) - t).sum()

        check_grad(f, x0)

    def test_broadcasting(self):
        rng = np.random.default_rng(1)
        x0 = rng.standard_normal((4,))
        other = rng.standard_normal((3, 4))

        def f(t):
            return ((t + Tensor(other)) * t).sum()

        check_grad(f, x0)

    def test_exp_log_sqrt(self):
        rng = np.random.default_rng(2)
        x0 = rng.uniform(0.5, 2.0, (5,))

        def f(t):
            return (t.exp().log() + t.sqrt()).sum()

        check_grad(f, x0)

    def test_sigmoid_leaky(self):
        rng = np.random.default_rng(3)
        x0 = rng.standard_normal((10,))

        def f(t):
            return (t.sigmoid() * t.leaky_relu(0.1)).sum()

        check_grad(f, x0)

    def test_clamp_min(self):
        x0 = np.array([-1.0, 0.5, 2.0])

        def f(t):
            return (t.clamp_min(0.2) ** 2).sum()

        check_grad(f, x0)


class TestShapeOps:
    def test_reshape_transpose_slice(self):
        rng = np.random.default_rng(4)
        x0 = rng.standard_normal((2, 3, 4))

        def f(t):
            return (t.reshape(6, 4).transpose()[1:3, :] ** 2).sum()

        check_grad(f, x0)

    def test_concat(self):
        rng = np.random.default_rng(5)
        x0 = rng.standard_normal((2, 3))

        def f(t):
            return (ad.concat([t, t * 2.0], axis=1) ** 2).sum()

        check_grad(f, x0)

    def test_sum_axis_mean(self):
        rng = np.random.default_rng(6)
        x0 = rng.standard_normal((3, 5))

        def f(t):
            return (t.sum(axis=1) * 2.0).mean() + t.mean(axis=0).sum()

        check_grad(f, x0)


class TestLinalg:
    def test_matmul_batched(self):
        rng = np.random.default_rng(7)
        x0 = rng.standard_normal((2, 3, 4))
        other = rng.standard_normal((2, 4, 3))

        def f(t):
            return (t @ Tensor(other)).sum()

        check_grad(f, x0)

    def test_inverse(self):
        rng = np.random.default_rng(8)
        a = rng.standard_normal((3, 3))
        x0 = a @ a.T + 3.0 * np.eye(3)

        def f(t):
            return (t.inverse() * Tensor(np.arange(9.0).reshape(3, 3))).sum()

        check_grad(f, x0, rtol=1e-5)

    def test_logdet(self):
        rng = np.random.default_rng(9)
        a = rng.standard_normal((2, 3, 3))
        x0 = a @ np.swapaxes(a, -1, -2) + 2.0 * np.eye(3)

        def f(t):
            return t.logdet().sum()

        check_grad(f, x0, rtol=1e-5)


class TestConv:
    def test_conv2d_weight_bias_input(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((2, 3, 5, 5))
        w0 = rng.standard_normal((4, 3, 3, 3)) * 0.3
        b0 = rng.standard_normal(4) * 0.1
        co = rng.standard_normal((2, 4, 5, 5))

        def fw(wflat):
            out = ad.conv2d(Tensor(x), Tensor(wflat.reshape(w0.shape)), Tensor(b0))
            return (out * Tensor(co)).sum()

        t = Tensor(w0, requires_grad=True)
        loss = (ad.conv2d(Tensor(x), t, Tensor(b0)) * Tensor(co)).sum()
        loss.backward()
        want = fd_grad(lambda v: float(fw(v).data), w0)
        assert np.max(np.abs(t.grad - want)) <= 1e-6 * max(1.0, np.max(np.abs(want)))

        tb = Tensor(b0, requires_grad=True)
        loss = (ad.conv2d(Tensor(x), Tensor(w0), tb) * Tensor(co)).sum()
        loss.backward()
        want_b = fd_grad(
            lambda v: float((ad.conv2d(Tensor(x), Tensor(w0), Tensor(v)) * Tensor(co)).sum().data),
            b0,
        )
        assert np.allclose(tb.grad, want_b, atol=1e-6)

        tx = Tensor(x, requires_grad=True)
        loss = (ad.conv2d(tx, Tensor(w0), Tensor(b0)) * Tensor(co)).sum()
        loss.backward()
        want_x = fd_grad(
            lambda v: float((ad.conv2d(Tensor(v), Tensor(w0), Tensor(b0)) * Tensor(co)).sum().data),
            x,
        )
        assert np.max(np.abs(tx.grad - want_x)) <= 1e-6 * max(1.0, np.max(np.abs(want_x)))

    def test_kernel_larger_than_image(self):
        # 7x7 kernel on a 4x4 image still produces a 4x4 map
        rng = np.random.default_rng(11)
        x = Tensor(rng.standard_normal((1, 1, 4, 4)))
        w = Tensor(rng.standard_normal((2, 1, 7, 7)))
        b = Tensor(np.zeros(2))
        assert ad.conv2d(x, w, b).shape == (1, 2, 4, 4)


class TestComplexPairs:
    def test_cmatmul_matches_numpy(self):
        rng = np.random.default_rng(12)
        a = rng.standard_normal((3, 4)) + 1j * rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2)) + 1j * rng.standard_normal((4, 2))
        out = ad.cvalue(ad.cmatmul(ad.cpair(a), ad.cpair(b)))
        assert np.allclose(out, a @ b, atol=1e-12)

    def test_cherm_inverse_and_logdet(self):
        rng = np.random.default_rng(13)
        a = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
        c = a @ a.conj().T + 2.0 * np.eye(4)
        inv = ad.cvalue(ad.cherm_inverse(ad.cpair(c)))
        assert np.allclose(inv, np.linalg.inv(c), atol=1e-10)
        ld = ad.cherm_logdet(ad.cpair(c)).data
        assert ld == pytest.approx(np.linalg.slogdet(c)[1], rel=1e-12)

    def test_gradient_through_complex_inverse(self):
        # real parameter scales a Hermitian matrix; differentiate logdet(inv)
        rng = np.random.default_rng(14)
        a = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
        c = a @ a.conj().T + 2.0 * np.eye(3)

        def f(t):
            cre = Tensor(c.real) * t
            cim = Tensor(c.imag) * t
            inv = ad.cherm_inverse((cre, cim))
            return ad.cherm_logdet((inv[0] + Tensor(np.eye(3)), inv[1]))

        check_grad(f, np.array(1.3), rtol=1e-5)
