"""Tests for the differentiable numeric substrate."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import dynrad.tensorcore as tc
from dynrad.errors import DimensionError, EvaluationError


def rand(rng, *shape):
    return rng.normal(size=shape)


class TestLinear:
    def test_identity(self):
        y = tc.linear(tc.Tensor([1.0, 0.0]), tc.Tensor(np.eye(2)), tc.Tensor([0.0, 0.0]))
        np.testing.assert_allclose(y.data, [1.0, 0.0])

    def test_hand_evaluated(self):
        y = tc.linear(tc.Tensor([1.0, 2.0]), tc.Tensor([[1.0, 1.0], [1.0, 1.0]]),
                      tc.Tensor([1.0, 1.0]))
        np.testing.assert_allclose(y.data, [4.0, 4.0])

    def test_zero_weight_broadcasts_bias(self):
        x = tc.Tensor(np.random.default_rng(0).normal(size=(5, 3)))
        y = tc.linear(x, tc.Tensor(np.zeros((3, 2))), tc.Tensor([0.5, -1.5]))
        np.testing.assert_allclose(y.data, np.broadcast_to([0.5, -1.5], (5, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            tc.linear(tc.Tensor([1.0, 2.0, 3.0]), tc.Tensor(np.zeros((2, 2))), None)

    def test_grad(self):
        rng = np.random.default_rng(1)
        x = tc.Tensor(rand(rng, 4, 3), requires_grad=True)
        w = tc.Tensor(rand(rng, 3, 2), requires_grad=True)
        b = tc.Tensor(rand(rng, 2), requires_grad=True)
        r = tc.Tensor(rand(rng, 4, 2))
        err = tc.grad_check(lambda: ((tc.linear(x, w, b) - r) ** 2).sum(), [x, w, b])
        assert err < 1e-3


class TestSoftmax:
    def test_symmetry(self):
        y = tc.softmax(tc.Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(y.data, np.full(3, 1 / 3))

    def test_stabilized(self):
        y = tc.softmax(tc.Tensor([1000.0, 1000.0]))
        np.testing.assert_allclose(y.data, [0.5, 0.5])
        assert np.isfinite(y.data).all()

    def test_closed_form(self):
        y = tc.softmax(tc.Tensor([0.0, np.log(3.0)]))
        np.testing.assert_allclose(y.data, [0.25, 0.75], atol=1e-12)

    def test_empty_axis(self):
        with pytest.raises(DimensionError):
            tc.softmax(tc.Tensor(np.zeros((3, 0))), axis=1)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_rows_sum_to_one(self, xs):
        y = tc.softmax(tc.Tensor(np.array(xs)))
        assert abs(y.data.sum() - 1.0) < 1e-6
        assert (y.data >= 0).all()

    def test_grad(self):
        rng = np.random.default_rng(2)
        x = tc.Tensor(rand(rng, 3, 4), requires_grad=True)
        r = tc.Tensor(rand(rng, 3, 4))
        err = tc.grad_check(lambda: (tc.softmax(x, axis=1) * r).sum(), [x])
        assert err < 1e-3


class TestBilinearSample:
    def test_lattice_point(self):
        rng = np.random.default_rng(3)
        m = tc.Tensor(rand(rng, 3, 4, 5))
        out, mask = tc.bilinear_sample(m, np.array([[2.0, 1.0]]))
        np.testing.assert_allclose(out.data[0], m.data[1, 2])
        assert mask[0] == 1.0

    def test_midpoint(self):
        m = tc.Tensor(np.array([[[1.0], [3.0]]]))  # 1x2 map
        out, _ = tc.bilinear_sample(m, np.array([[0.5, 0.0]]))
        np.testing.assert_allclose(out.data[0], [2.0])

    def test_derived_weights(self):
        rng = np.random.default_rng(4)
        m = tc.Tensor(rand(rng, 2, 2, 3))
        out, _ = tc.bilinear_sample(m, np.array([[0.25, 0.75]]))
        want = (0.1875 * m.data[0, 0] + 0.0625 * m.data[0, 1]
                + 0.5625 * m.data[1, 0] + 0.1875 * m.data[1, 1])
        np.testing.assert_allclose(out.data[0], want)

    def test_out_of_bounds_masked(self):
        m = tc.Tensor(np.ones((2, 2, 3)))
        out, mask = tc.bilinear_sample(m, np.array([[-0.1, 0.0], [0.0, 5.0], [1.0, 1.0]]))
        np.testing.assert_allclose(mask, [0.0, 0.0, 1.0])
        np.testing.assert_allclose(out.data[:2], 0.0)

    def test_linear_along_axis(self):
        m = tc.Tensor(np.arange(8.0).reshape(2, 4, 1))
        ts = np.linspace(0.0, 3.0, 13)
        out, _ = tc.bilinear_sample(m, np.stack([ts, np.zeros_like(ts)], axis=1))
        np.testing.assert_allclose(out.data[:, 0], ts, atol=1e-12)

    def test_masked_entries_zero_gradient(self):
        m = tc.Tensor(np.ones((2, 2, 1)), requires_grad=True)
        out, _ = tc.bilinear_sample(m, np.array([[-1.0, 0.0]]))
        out.sum().backward()
        np.testing.assert_allclose(m.grad, 0.0)

    def test_grad(self):
        rng = np.random.default_rng(5)
        m = tc.Tensor(rand(rng, 3, 3, 2), requires_grad=True)
        uv = np.array([[0.3, 0.6], [1.7, 1.2], [2.0, 2.0], [-1.0, 0.0]])
        err = tc.grad_check(lambda: (tc.bilinear_sample(m, uv)[0] ** 2).sum(), [m])
        assert err < 1e-3


class TestPositionalEncode:
    def test_zero_alternates(self):
        y = tc.positional_encode(tc.Tensor([0.0, 0.0]), 3)
        np.testing.assert_allclose(y.data, np.tile([0.0, 1.0], 6))

    def test_one(self):
        y = tc.positional_encode(tc.Tensor([1.0]), 1)
        np.testing.assert_allclose(y.data, [np.sin(np.pi), -1.0], atol=1e-12)

    def test_half(self):
        y = tc.positional_encode(tc.Tensor([0.5]), 2)
        np.testing.assert_allclose(y.data, [1.0, 0.0, 0.0, -1.0], atol=1e-12)

    def test_grad(self):
        rng = np.random.default_rng(6)
        p = tc.Tensor(rand(rng, 4, 3), requires_grad=True)
        r = tc.Tensor(rand(rng, 4, 3 * 2 * 4))
        err = tc.grad_check(lambda: (tc.positional_encode(p, 4) * r).sum(), [p])
        assert err < 1e-3


class TestDft:
    def test_constant_dc_only(self):
        S = tc.dft_1d(tc.Tensor(np.full(6, 2.5)))
        np.testing.assert_allclose(S.re.data[0], 15.0, atol=1e-9)
        np.testing.assert_allclose(S.re.data[1:], 0.0, atol=1e-9)
        np.testing.assert_allclose(S.im.data, 0.0, atol=1e-9)

    def test_unit_impulse(self):
        S = tc.dft_1d(tc.Tensor([1.0, 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(S.re.data, 1.0, atol=1e-12)
        np.testing.assert_allclose(S.im.data, 0.0, atol=1e-12)

    def test_derived_1234(self):
        S = tc.dft_1d(tc.Tensor([1.0, 2.0, 3.0, 4.0]))
        np.testing.assert_allclose(S.re.data, [10.0, -2.0, -2.0, -2.0], atol=1e-9)
        np.testing.assert_allclose(S.im.data, [0.0, 2.0, 0.0, -2.0], atol=1e-9)

    def test_inverse_of_derived(self):
        S = tc.ComplexSpectrum(tc.Tensor([10.0, -2.0, -2.0, -2.0]),
                               tc.Tensor([0.0, 2.0, 0.0, -2.0]))
        np.testing.assert_allclose(tc.idft_1d(S).data, [1.0, 2.0, 3.0, 4.0], atol=1e-9)

    def test_dc_only_inverse(self):
        S = tc.ComplexSpectrum(tc.Tensor([12.0, 0.0, 0.0]), tc.Tensor(np.zeros(3)))
        np.testing.assert_allclose(tc.idft_1d(S).data, 4.0, atol=1e-12)

    def test_roundtrip_all_lengths(self):
        rng = np.random.default_rng(7)
        for T in range(1, 65):
            f = rng.normal(size=T)
            back = tc.idft_1d(tc.dft_1d(tc.Tensor(f)))
            np.testing.assert_allclose(back.data, f, atol=1e-6)


def dft_vec(v):
    """Direct DFT of a complex vector composed from the real dft_1d oracle."""
    Sr = tc.dft_1d(tc.Tensor(np.real(v)))
    Si = tc.dft_1d(tc.Tensor(np.imag(v)))
    return (Sr.re.data + 1j * Sr.im.data) + 1j * (Si.re.data + 1j * Si.im.data)


def direct_dft2(x):
    """O((AB)^2) 2-D DFT by composing the 1-D direct sums along each axis."""
    x = np.asarray(x, dtype=np.complex128)
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape[1:]):
        sl = (slice(None),) + idx
        out[sl] = dft_vec(x[sl])
    out2 = np.zeros_like(out)
    for a in range(x.shape[0]):
        for idx in np.ndindex(x.shape[2:]):
            sl = (a, slice(None)) + idx
            out2[sl] = dft_vec(out[sl])
    return out2


class TestRfft2:
    def test_constant_dc_only(self):
        S = tc.rfft2(tc.Tensor(np.full((3, 4), 1.5)))
        assert abs(S.re.data[0, 0] - 18.0) < 1e-9
        rest = S.re.data.copy()
        rest[0, 0] = 0.0
        np.testing.assert_allclose(rest, 0.0, atol=1e-9)
        np.testing.assert_allclose(S.im.data, 0.0, atol=1e-9)

    def test_derived_2x2(self):
        S = tc.rfft2(tc.Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_allclose(S.re.data, [[10.0, -2.0], [-4.0, 0.0]], atol=1e-9)
        np.testing.assert_allclose(S.im.data, 0.0, atol=1e-9)

    def test_irfft2_of_derived(self):
        S = tc.ComplexSpectrum(tc.Tensor([[10.0, -2.0], [-4.0, 0.0]]),
                               tc.Tensor(np.zeros((2, 2))))
        y = tc.irfft2(S, (2, 2))
        np.testing.assert_allclose(y.data, [[1.0, 2.0], [3.0, 4.0]], atol=1e-9)

    def test_dc_only_spectrum_constant(self):
        re = np.zeros((3, 3))
        re[0, 0] = 36.0
        y = tc.irfft2(tc.ComplexSpectrum(tc.Tensor(re), tc.Tensor(np.zeros((3, 3)))), (3, 4))
        np.testing.assert_allclose(y.data, 3.0, atol=1e-9)

    def test_roundtrip_random_blocks(self):
        rng = np.random.default_rng(8)
        for shape in [(4, 4, 3), (5, 3), (2, 6, 2), (1, 1), (8, 8, 4)]:
            x = rng.normal(size=shape)
            y = tc.irfft2(tc.rfft2(tc.Tensor(x)), shape[:2])
            np.testing.assert_allclose(y.data, x, atol=1e-6)

    def test_matches_direct_dft_oracle(self):
        rng = np.random.default_rng(9)
        for shape in [(2, 2), (3, 5), (8, 8, 4), (4, 7, 2)]:
            x = rng.normal(size=shape)
            S = tc.rfft2(tc.Tensor(x))
            full = direct_dft2(x)
            half = shape[1] // 2 + 1
            np.testing.assert_allclose(S.re.data, full.real[:, :half], atol=1e-6)
            np.testing.assert_allclose(S.im.data, full.imag[:, :half], atol=1e-6)

    def test_incompatible_out_shape(self):
        S = tc.rfft2(tc.Tensor(np.zeros((4, 4))))
        with pytest.raises(DimensionError):
            tc.irfft2(S, (4, 8))

    def test_grad_filtered_chain(self):
        rng = np.random.default_rng(10)
        x = tc.Tensor(rng.normal(size=(4, 6, 2)), requires_grad=True)
        wre = tc.Tensor(rng.normal(size=(4, 4, 1)), requires_grad=True)
        wim = tc.Tensor(0.1 * rng.normal(size=(4, 4, 1)), requires_grad=True)

        def loss():
            S = tc.rfft2(x, axes=(0, 1))
            re = S.re * wre - S.im * wim
            im = S.re * wim + S.im * wre
            y = tc.irfft2(tc.ComplexSpectrum(re, im), (4, 6), axes=(0, 1))
            return (y ** 2).sum()

        assert tc.grad_check(loss, [x, wre, wim]) < 1e-3


class TestGradCheck:
    def test_quadratic_exact(self):
        th = tc.Tensor([3.0], requires_grad=True)
        th.grad = None
        out = (th * th).sum()
        out.backward()
        assert abs(th.grad[0] - 6.0) < 1e-12
        eps = 1e-4
        numeric = ((3.0 + eps) ** 2 - (3.0 - eps) ** 2) / (2 * eps)
        assert abs(numeric - 6.0) < 1e-8
        assert tc.grad_check(lambda: (th * th).sum(), [th]) < 1e-8

    def test_nonfinite_raises(self):
        th = tc.Tensor([0.0], requires_grad=True)
        with pytest.raises(EvaluationError):
            tc.grad_check(lambda: tc.log(th).sum(), [th])

    def test_core_ops(self):
        rng = np.random.default_rng(11)
        x = tc.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        r = tc.Tensor(rng.normal(size=(3, 4)))
        for fn in [tc.exp, tc.tanh, tc.sigmoid, tc.softplus, tc.sin, tc.cos]:
            assert tc.grad_check(lambda fn=fn: (fn(x) * r).sum(), [x]) < 1e-3
        y = tc.Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
        assert tc.grad_check(lambda: (x / y * r).sum(), [x, y]) < 1e-3
        assert tc.grad_check(lambda: (tc.log(y) * r).sum(), [y]) < 1e-3
        assert tc.grad_check(lambda: (tc.absolute(y) * r).sum(), [y]) < 1e-3
        assert tc.grad_check(lambda: tc.maximum_const(x, 0.3).sum(), [x]) < 1e-3
        assert tc.grad_check(lambda: (tc.concat([x, y], axis=1) * 0.7).sum(), [x, y]) < 1e-3
        assert tc.grad_check(lambda: (tc.where(x.data > 0, x, y) * r).sum(), [x, y]) < 1e-3
        assert tc.grad_check(lambda: (x[1:, ::2] ** 2).sum(), [x]) < 1e-3


class TestTensorBasics:
    def test_data_length_matches_shape(self):
        t = tc.Tensor(np.zeros((2, 3, 4)))
        assert t.size == 24 and t.shape == (2, 3, 4)

    def test_grad_same_shape(self):
        t = tc.Tensor(np.ones((3, 2)), requires_grad=True)
        (t * 2.0).sum().backward()
        assert t.grad.shape == t.data.shape

    def test_broadcast_unbroadcast(self):
        a = tc.Tensor(np.ones((3, 1)), requires_grad=True)
        b = tc.Tensor(np.ones((1, 4)), requires_grad=True)
        (a * b).sum().backward()
        assert a.grad.shape == (3, 1) and b.grad.shape == (1, 4)
        np.testing.assert_allclose(a.grad, 4.0)
        np.testing.assert_allclose(b.grad, 3.0)

    def test_no_grad_blocks_tape(self):
        a = tc.Tensor(np.ones(3), requires_grad=True)
        with tc.no_grad():
            out = (a * 2.0).sum()
        assert not out.requires_grad

    def test_cumprod_grad(self):
        rng = np.random.default_rng(12)
        x = tc.Tensor(rng.uniform(0.2, 1.0, size=(2, 5)), requires_grad=True)
        assert tc.grad_check(lambda: (tc.cumprod(x, axis=1) ** 2).sum(), [x]) < 1e-3


class TestParameterStore:
    def test_unique_paths(self):
        store = tc.ParameterStore(rng_seed=7)
        store.add("a/w", np.zeros(3))
        with pytest.raises(KeyError):
            store.add("a/w", np.zeros(3))

    def test_checkpoint_roundtrip(self, tmp_path):
        rng = np.random.default_rng(13)
        store = tc.ParameterStore(rng_seed=42)
        store.add("enc/w0", rng.normal(size=(3, 3, 3, 8)))
        store.add("field/b", rng.normal(size=(16,)))
        store.add("scalar", np.array(1.25))
        p = tmp_path / "ck.dynrad"
        store.save(p)
        loaded = tc.ParameterStore.load(p)
        assert loaded.rng_seed == 42
        assert sorted(loaded.paths()) == sorted(store.paths())
        for name, t in store.items():
            np.testing.assert_array_equal(loaded[name].data, t.data)

    def test_checkpoint_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.dynrad"
        p.write_bytes(b"NOTDYNRAD" + b"\x00" * 16)
        with pytest.raises(ValueError):
            tc.ParameterStore.load(p)

    def test_float32_load(self, tmp_path):
        store = tc.ParameterStore()
        store.add("w", np.arange(4.0))
        p = tmp_path / "ck.dynrad"
        store.save(p)
        loaded = tc.ParameterStore.load(p, dtype=np.float32)
        assert loaded["w"].dtype == np.float32
