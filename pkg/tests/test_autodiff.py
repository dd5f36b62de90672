import numpy as np
import pytest

from emef.autodiff import (
    Adam,
    AdamState,
    NonFiniteError,
    TapeError,
    Tensor,
    adam_step,
    backward,
    box_mean,
    concat_channels,
    conv2d,
    conv2d_modulated,
    gradcheck,
    instance_norm,
    leaky_relu,
    modulate_weight,
    nearest_upsample_2x,
    no_grad,
    precision,
    relu,
    reset_tape,
    sigmoid,
    tanh,
)
from gradcases import op_cases


def conv2d_loops(x, w, b, stride, pad):
    """Direct six-deep loop nest; independent of the im2col path."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for bi in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for c in range(cin):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[bi, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[bi, o, i, j] = acc
    return out


def leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _clean_tape():
    reset_tape()
    yield
    reset_tape()


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = Tensor(rng.random((1, 1, 3, 3)))
        out = conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_sum_of_ones(self):
        out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == 9.0

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_loop_oracle(self, rng, stride, pad):
        x = rng.standard_normal((2, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).data
        want = conv2d_loops(x, w, b, stride, pad)
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-12)

    def test_output_size(self, rng):
        out = conv2d(Tensor(rng.random((1, 2, 64, 64))), Tensor(rng.random((4, 2, 3, 3))), stride=2, pad=1)
        assert out.shape == (1, 4, 32, 32)

    def test_errors(self, rng):
        x = Tensor(rng.random((1, 2, 5, 5)))
        with pytest.raises(ValueError):
            conv2d(x, Tensor(rng.random((1, 3, 3, 3))))
        with pytest.raises(ValueError):
            conv2d(x, Tensor(rng.random((1, 2, 2, 2))))
        bad = x.data.copy()
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(NonFiniteError):
            conv2d(Tensor(bad), Tensor(rng.random((1, 2, 3, 3))))


class TestModulatedConv:
    def test_unit_style_without_demod_is_plain_conv(self, rng):
        x = Tensor(rng.random((1, 3, 6, 6)))
        w = Tensor(rng.standard_normal((2, 3, 3, 3)))
        a = conv2d_modulated(x, w, Tensor(np.ones(3)), demodulate=False, pad=1)
        b = conv2d(x, w, pad=1)
        np.testing.assert_array_equal(a.data, b.data)

    def test_scalar_kernel_normalises_to_one(self):
        wm = modulate_weight(Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.ones(1)), eps=1e-12)
        assert wm.data.item() == pytest.approx(1.0, abs=1e-9)

    def test_demodulated_norm_close_to_one(self, rng):
        for _ in range(20):
            w = Tensor(rng.standard_normal((8, 5, 3, 3)))
            s = Tensor(rng.uniform(0.1, 3.0, 5))
            wm = modulate_weight(w, s, eps=1e-8).data
            norms = (wm ** 2).sum(axis=(1, 2, 3))
            assert np.all(norms <= 1.0) and np.all(norms >= 1.0 - 1e-3)

    @pytest.mark.parametrize("alpha", [0.25, 2.0, 8.0, 1024.0])
    def test_scale_invariance_bitwise_powers_of_two(self, rng, alpha):
        x = Tensor(rng.random((1, 4, 6, 6)))
        w = Tensor(rng.standard_normal((3, 4, 3, 3)))
        s = rng.uniform(0.2, 2.0, 4)
        a = conv2d_modulated(x, w, Tensor(s), eps=0.0, allow_zero_eps=True)
        b = conv2d_modulated(x, w, Tensor(alpha * s), eps=0.0, allow_zero_eps=True)
        np.testing.assert_array_equal(a.data, b.data)

    @pytest.mark.parametrize("alpha", [0.3, 1.7, 13.0])
    def test_scale_invariance_general_alpha(self, rng, alpha):
        x = Tensor(rng.random((1, 4, 6, 6)))
        w = Tensor(rng.standard_normal((3, 4, 3, 3)))
        s = rng.uniform(0.2, 2.0, 4)
        a = conv2d_modulated(x, w, Tensor(s), eps=0.0, allow_zero_eps=True)
        b = conv2d_modulated(x, w, Tensor(alpha * s), eps=0.0, allow_zero_eps=True)
        np.testing.assert_allclose(a.data, b.data, rtol=1e-12, atol=1e-14)

    def test_errors(self, rng):
        x = Tensor(rng.random((1, 3, 5, 5)))
        w = Tensor(rng.random((2, 3, 3, 3)))
        with pytest.raises(ValueError):
            conv2d_modulated(x, w, Tensor(np.ones(2)))
        with pytest.raises(ValueError):
            conv2d_modulated(x, w, Tensor(np.ones(3)), eps=0.0)
        with pytest.raises(ValueError):
            conv2d_modulated(x, w, Tensor(np.ones(3)), eps=-1.0)


class TestElementwise:
    def test_values(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])
        assert tanh(Tensor([0.0])).data[0] == 0.0
        assert sigmoid(Tensor([0.0])).data[0] == 0.5
        np.testing.assert_allclose(leaky_relu(Tensor([-1.0, 3.0]), 0.2).data, [-0.2, 3.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            Tensor(np.ones(3)) + Tensor(np.ones(4))


class TestStructure:
    def test_concat(self, rng):
        a, b = rng.random((1, 1, 3, 3)), rng.random((1, 1, 3, 3))
        out = concat_channels([Tensor(a), Tensor(b)]).data
        assert out.shape == (1, 2, 3, 3)
        np.testing.assert_array_equal(out[:, :1], a)
        np.testing.assert_array_equal(out[:, 1:], b)

    def test_upsample(self):
        x = np.arange(4.0).reshape(1, 1, 2, 2)
        out = nearest_upsample_2x(Tensor(x)).data[0, 0]
        np.testing.assert_array_equal(out, [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])

    def test_instance_norm_moments(self, rng):
        x = Tensor(rng.random((2, 3, 8, 8)) * 5 + 2)
        out = instance_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3))).data
        assert np.abs(out.mean(axis=(2, 3))).max() <= 1e-6
        assert np.abs(out.var(axis=(2, 3)) - 1).max() <= 1e-4

    def test_instance_norm_constant_plane_is_finite(self):
        out = instance_norm(Tensor(np.full((1, 1, 4, 4), 3.0))).data
        assert np.all(np.isfinite(out)) and np.all(out == 0)

    def test_box_mean(self, rng):
        x = rng.random((1, 1, 10, 10))
        out = box_mean(Tensor(x), 4, stride=3).data
        want = np.array([[x[0, 0, i:i + 4, j:j + 4].mean() for j in range(0, 7, 3)] for i in range(0, 7, 3)])
        np.testing.assert_allclose(out[0, 0], want, rtol=1e-12)


class TestBackward:
    def test_sum(self, rng):
        x = leaf(rng, 3, 4)
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_square(self, rng):
        x = leaf(rng, 5)
        backward((x * x).sum())
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_non_scalar_rejected(self, rng):
        x = leaf(rng, 3)
        with pytest.raises(TapeError):
            backward(x * 2.0)

    def test_disconnected_rejected(self, rng):
        with pytest.raises(TapeError):
            backward(Tensor(np.array(1.0)))
        x = leaf(rng, 3)
        with no_grad():
            loss = x.sum()
        with pytest.raises(TapeError):
            backward(loss)

    def test_tape_consumed_once(self, rng):
        x = leaf(rng, 3)
        loss = (x * x).sum()
        backward(loss)
        with pytest.raises(TapeError):
            backward(loss)

    def test_shared_subexpression_accumulates(self, rng):
        x = leaf(rng, 4)
        y = x * 3.0
        backward((y + y * y).sum())
        np.testing.assert_allclose(x.grad, 3.0 + 18.0 * x.data)


@pytest.mark.parametrize("name", list(op_cases(np.random.default_rng(0)).keys()))
def test_gradients_match_finite_differences(name):
    with precision(np.float64):
        fn, params = op_cases(np.random.default_rng(7))[name]
        assert gradcheck(fn, params, h=1e-5) <= 1e-4


class TestAdam:
    def test_zero_grad_leaves_params(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        state = AdamState.zeros_like([p])
        for _ in range(3):
            adam_step([p], [np.zeros(2)], state, lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_zero_grad_decays_moments(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        state = AdamState.zeros_like([p])
        state.m[0][:] = 0.4
        state.v[0][:] = 0.2
        adam_step([p], [np.zeros(2)], state, lr=0.1)
        np.testing.assert_allclose(state.m[0], 0.2)
        np.testing.assert_allclose(state.v[0], 0.2 * 0.999)

    def test_first_step_magnitude_is_lr(self):
        p = Tensor(np.array([3.0]), requires_grad=True)
        adam_step([p], [np.ones(1)], AdamState.zeros_like([p]), lr=0.1)
        assert p.data[0] == pytest.approx(2.9, abs=1e-6)

    def test_converges_on_quadratic(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam([x], lr=0.1)
        for _ in range(50):
            opt.zero_grad()
            backward((x * x).sum())
            opt.step()
        assert abs(x.data[0]) < 0.05

    def test_misaligned(self):
        p = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ValueError):
            adam_step([p], [], AdamState.zeros_like([p]), lr=0.1)
        with pytest.raises(ValueError):
            adam_step([p], [np.ones(3)], AdamState.zeros_like([p]), lr=0.1)


def test_determinism(rng):
    x = rng.random((1, 3, 16, 16)).astype(np.float32)
    w = rng.standard_normal((8, 3, 3, 3)).astype(np.float32)
    a = conv2d(Tensor(x), Tensor(w), pad=1).data
    b = conv2d(Tensor(x), Tensor(w), pad=1).data
    assert a.tobytes() == b.tobytes()


def test_scalar_results_keep_precision():
    a = Tensor(np.full((3, 3), 0.1), dtype=np.float64)
    assert a.mean().dtype == np.float64
    assert (a.sum() * 2.0).dtype == np.float64
    assert Tensor(np.float64(0.1)).dtype == np.float64
