import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condistfl import tensor as T
from condistfl.tensor import Tensor, TapeError


def param(x, dtype=np.float64):
    return Tensor(x, requires_grad=True, dtype=dtype)


class TestElementwise:
    def test_add(self):
        out = T.elementwise("add", Tensor([1, 2]), Tensor([3, 4]))
        np.testing.assert_array_equal(out.data, [4, 6])

    def test_exp_zero(self):
        np.testing.assert_array_equal(T.exp(Tensor([0, 0])).data, [1, 1])

    def test_div_value_and_grads(self):
        # central differences at a=1, b=4 with h=1e-4: 0.25 and -0.0625
        a, b = param([1.0]), param([4.0])
        out = T.elementwise("div", a, b)
        T.backward(T.sum(out))
        assert out.data[0] == pytest.approx(0.25)
        assert a.grad[0] == pytest.approx(0.25, rel=1e-6)
        assert b.grad[0] == pytest.approx(-0.0625, rel=1e-6)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
            T.elementwise("add", Tensor([1, 2]), Tensor([1, 2, 3]))

    def test_div_by_tiny_denominator(self):
        with pytest.raises(ValueError, match="1e-12"):
            T.elementwise("div", Tensor([1.0]), Tensor([0.0]))

    def test_scalar_operand(self):
        a = param([1.0, 2.0])
        out = T.sum(a * 3.0 + 1.0)
        T.backward(out)
        assert out.item() == pytest.approx(11.0)
        np.testing.assert_allclose(a.grad, [3.0, 3.0])

    def test_scalar_tensor_operand_grad(self):
        s = param(2.0)
        a = param([1.0, 2.0, 3.0])
        T.backward(T.sum(a * s))
        assert s.grad == pytest.approx(6.0)
        np.testing.assert_allclose(a.grad, [2.0, 2.0, 2.0])

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            T.elementwise("tan", Tensor([1.0]))

    def test_log_of_nonpositive(self):
        with pytest.raises(ValueError):
            T.log(Tensor([0.0]))


class TestReduce:
    def test_sum_all(self):
        assert T.reduce("sum", Tensor([1, 2, 3]), "all").item() == 6

    def test_mean_all(self):
        assert T.reduce("mean", Tensor([2, 4]), "all").item() == 3

    def test_max_index_channel(self):
        out = T.reduce("max_index", Tensor([[0.1], [0.9]]), 0)
        np.testing.assert_array_equal(out.data, [1])

    def test_max_index_ties_pick_lowest(self):
        out = T.reduce("max_index", Tensor([[0.5], [0.5], [0.1]]), 0)
        np.testing.assert_array_equal(out.data, [0])

    def test_invalid_axis(self):
        with pytest.raises(ValueError):
            T.reduce("sum", Tensor([1, 2]), 3)

    def test_sum_axis_grad(self):
        a = param(np.arange(6.0).reshape(2, 3))
        T.backward(T.sum(T.sum(a, axis=1) * Tensor([1.0, 2.0], dtype=np.float64)))
        np.testing.assert_allclose(a.grad, [[1, 1, 1], [2, 2, 2]])


class TestConv2d:
    def test_identity_1x1(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 5, 5)))
        k = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        np.testing.assert_allclose(T.conv2d(x, k).data, x.data, rtol=1e-6)

    def test_counting_3x3(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), padding="same")
        assert out.data[0, 0, 2, 2] == 9
        assert out.data[0, 0, 0, 0] == 4

    def test_output_extent(self):
        x = Tensor(np.zeros((1, 1, 8, 8)))
        k = Tensor(np.zeros((2, 1, 3, 3)))
        assert T.conv2d(x, k, stride=2).shape == (1, 2, 4, 4)
        assert T.conv2d(x, k, padding="valid").shape == (1, 2, 6, 6)

    def test_non_positive_extent(self):
        with pytest.raises(ValueError):
            T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), padding="valid")

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 2, 5, 6))
        k = rng.normal(size=(3, 2, 3, 3))
        out = T.conv2d(Tensor(x, dtype=np.float64), Tensor(k, dtype=np.float64), stride=2).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for o in range(3):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[0, o, i, j] = np.sum(xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * k[o])
        np.testing.assert_allclose(out, ref, rtol=1e-12)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_gradients_match_finite_differences(self, stride):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(2, 3, 8, 8)))
        k = Tensor(rng.normal(size=(4, 3, 3, 3)))
        wts = rng.normal(size=(2, 4, 8 // stride, 8 // stride))

        def f(x, k):
            return T.sum(T.conv2d(x, k, stride=stride) * Tensor(wts, dtype=np.float64))

        rep = T.grad_check(f, [x, k], h=1e-3, tol=1e-3)
        assert rep.passed, rep.max_rel_error


class TestSelectMask:
    def test_all_true_is_identity(self):
        a = Tensor(np.arange(8.0).reshape(1, 2, 2, 2))
        out = T.select_mask(a, np.ones((1, 2, 2), bool))
        np.testing.assert_array_equal(out.data, a.data.reshape(2, 4))

    def test_all_false_is_empty(self):
        a = Tensor(np.ones((1, 2, 2, 2)))
        assert T.select_mask(a, np.zeros((1, 2, 2), bool)).shape == (2, 0)

    def test_diagonal_sum(self):
        field = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        keep = np.array([[[True, False], [False, True]]])
        assert T.sum(T.select_mask(Tensor(field), keep)).item() == 1.0 + 4.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.select_mask(Tensor(np.ones((1, 2, 2, 2))), np.ones((1, 3, 2), bool))

    def test_gradient_only_through_kept(self):
        a = param(np.ones((1, 2, 2, 2)))
        keep = np.array([[[True, False], [False, True]]])
        T.backward(T.sum(T.select_mask(a, keep)))
        np.testing.assert_array_equal(a.grad[0, 0], keep[0].astype(float))
        np.testing.assert_array_equal(a.grad[0, 1], keep[0].astype(float))


class TestDetach:
    def test_detached_grad_absent(self):
        a = param([1.0, 2.0])
        d = T.detach(a)
        assert not d.requires_grad
        T.backward(T.sum(a))
        assert d.grad is None

    def test_loss_from_detached_only(self):
        a = param([1.0, 2.0])
        loss = T.sum(T.pow2(T.detach(a)))
        T.backward(loss)
        assert a.grad is None or not np.any(a.grad)

    def test_upstream_grads_exactly_zero(self):
        a = param([1.0, 2.0])
        b = param([3.0, 4.0])
        loss = T.sum(T.detach(a * 2.0) * b)
        T.backward(loss)
        assert a.grad is None
        np.testing.assert_array_equal(b.grad, [2.0, 4.0])


class TestBackward:
    def test_weighted_sum(self):
        x = param([1.0, -2.0, 3.0])
        w = Tensor([0.5, 2.0, -1.0], dtype=np.float64)
        T.backward(T.sum(w * x))
        np.testing.assert_array_equal(x.grad, w.data)

    def test_square(self):
        x = param([1.0, 2.0])
        T.backward(T.sum(T.pow2(x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar(self):
        with pytest.raises(ValueError):
            T.backward(param([1.0, 2.0]) * 2.0)

    def test_double_backward(self):
        x = param([1.0])
        loss = T.sum(x * 2.0)
        T.backward(loss)
        with pytest.raises(TapeError):
            T.backward(loss)

    def test_intermediates_populated(self):
        x = param([1.0, 2.0])
        y = x * 3.0
        z = T.pow2(y)
        T.backward(T.sum(z))
        assert y.grad is not None and z.grad is not None
        np.testing.assert_allclose(y.grad, 2 * y.data)

    def test_tape_replays_in_reverse(self):
        T.reset_tape()
        x = param([1.0])
        a = x * 2.0
        b = T.exp(a)
        tape = T.current_tape()
        assert [r[0] for r in tape.records] == [a, b]
        T.backward(T.sum(b))
        assert tape.consumed

    def test_leaf_accumulates(self):
        x = param([1.0])
        T.backward(T.sum(x * 2.0))
        T.backward(T.sum(x * 3.0))
        assert x.grad[0] == 5.0

    def test_linearity(self):
        rng = np.random.default_rng(3)
        x0 = rng.uniform(-2, 2, size=(6,))

        def f(x):
            return T.sum(T.exp(x) * x)

        def g(x):
            return T.sum(T.pow2(x) / 3.0)

        grads = []
        for fn in (f, g, lambda x: f(x) * 0.7 + g(x) * -1.3):
            x = param(x0)
            T.backward(fn(x))
            grads.append(x.grad)
        np.testing.assert_allclose(grads[2], 0.7 * grads[0] - 1.3 * grads[1], atol=1e-6)

    def test_no_grad_records_nothing(self):
        T.reset_tape()
        x = param([1.0])
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad
        assert len(T.current_tape()) == 0


class TestGradCheck:
    def test_sum_is_exact(self):
        rep = T.grad_check(lambda x: T.sum(x), Tensor(np.random.default_rng(0).normal(size=10)))
        assert rep.passed and rep.max_rel_error < 1e-8

    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError):
            T.grad_check(lambda x: x * 2.0, Tensor([1.0, 2.0]))

    def test_step_range(self):
        with pytest.raises(ValueError):
            T.grad_check(lambda x: T.sum(x), Tensor([1.0]), h=0.1)

    def test_detects_wrong_gradient(self):
        def bad(x):
            # forward is x^2 but the "gradient" flows as if it were 3x
            return T.sum(T.detach(T.pow2(x)) + x * 3.0 - T.detach(x * 3.0))

        assert not T.grad_check(bad, Tensor([1.0, 2.0])).passed


OPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (T.pow2(b) + 0.5),
    "exp": lambda a, b: T.exp(a) * b,
    "log": lambda a, b: T.log(T.pow2(a) + 0.1) * b,
    "neg": lambda a, b: -a * b,
    "pow2": lambda a, b: T.pow2(a) * b,
    "softmax": lambda a, b: T.softmax(a, axis=1, temperature=0.5) * b,
    "instance_norm": lambda a, b: T.instance_norm(a) * b,
    "leaky_relu": lambda a, b: T.leaky_relu(a, 0.1) * b,
    "norm_act": lambda a, b: T.norm_act(a, 0.1) * b,
    "upsample2": lambda a, b: T.upsample2(a) * T.upsample2(b),
    "gather": lambda a, b: T.gather_channels(a, [[0, 2], [1], [1, 2], [0]]) * T.gather_channels(b, [[0], [1], [2], [0]]),
    "concat": lambda a, b: T.concat([a, b], axis=1),
    "clamp_min": lambda a, b: T.clamp_min(a, 0.3) * b,
    "mean_axis": lambda a, b: T.mean(a * b, axis=(0, 2, 3)),
}


# piecewise ops: keep sample points clear of the kink so differences do not straddle it
KINKS = {"leaky_relu": 0.0, "clamp_min": 0.3}


@pytest.mark.parametrize("op", sorted(OPS))
@pytest.mark.parametrize("seed", range(20))
def test_op_gradients_match_finite_differences(op, seed):
    rng = np.random.default_rng(seed)
    av = rng.uniform(-2, 2, size=(2, 3, 4, 4))
    if op == "norm_act":
        # zero-mean planes of +-z pairs keep every normalised value clear of 0
        z = rng.uniform(0.1, 2, size=(2, 3, 8)) * rng.choice([-1, 1], size=(2, 3, 8))
        z = rng.permuted(np.concatenate([z, -z], axis=2), axis=2).reshape(2, 3, 4, 4)
        av = z * rng.uniform(0.5, 2, size=(2, 3, 1, 1)) + rng.uniform(-1, 1, size=(2, 3, 1, 1))
    if op in KINKS:
        k = KINKS[op]
        av = np.where(np.abs(av - k) < 0.01, av + np.where(av >= k, 0.02, -0.02), av)
    a = Tensor(av)
    b = Tensor(rng.uniform(-2, 2, size=(2, 3, 4, 4)))
    w = rng.normal(size=OPS[op](a, b).shape)

    def f(a, b):
        return T.sum(OPS[op](a, b) * Tensor(w, dtype=np.float64))

    rep = T.grad_check(f, [a, b], h=1e-3, tol=1e-3)
    assert rep.passed, (op, seed, rep.max_rel_error)


@settings(max_examples=50, deadline=None)
@given(
    data=st.lists(st.floats(-100, 100, allow_nan=False), min_size=4, max_size=4),
    keep=st.lists(st.booleans(), min_size=4, max_size=4),
)
def test_select_mask_sum_is_sum_of_kept(data, keep):
    a = Tensor(np.array(data).reshape(1, 1, 2, 2), dtype=np.float64)
    k = np.array(keep).reshape(1, 2, 2)
    got = T.sum(T.select_mask(a, k)).item()
    assert got == pytest.approx(float(np.sum(np.array(data)[np.array(keep)])), abs=1e-9)


def test_norm_act_matches_composition():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 5, 4)), dtype=np.float64)
    np.testing.assert_allclose(T.norm_act(x, 0.2).data, T.leaky_relu(T.instance_norm(x), 0.2).data, atol=1e-12)


def test_kernel_backends_agree():
    from condistfl import _kernels

    if _kernels.compiled_backend is None:
        pytest.skip("compiled kernels not built")
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 9, 7)).astype(np.float32)
    for k, s, p in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 1, 0)]:
        a = _kernels.python_backend.im2col(x, k, k, s, p)
        b = _kernels.compiled_backend.im2col(x, k, k, s, p)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(
            _kernels.python_backend.col2im(b, x.shape, k, k, s, p),
            _kernels.compiled_backend.col2im(b, x.shape, k, k, s, p),
            rtol=1e-5,
            atol=1e-5,
        )
    y = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
    fa = _kernels.python_backend.norm_act_forward(y, 0.01, 1e-5)
    fb = _kernels.compiled_backend.norm_act_forward(y, 0.01, 1e-5)
    for u, v in zip(fa, fb):
        np.testing.assert_allclose(u, v, rtol=1e-5, atol=1e-5)
    g = rng.normal(size=y.shape).astype(np.float32)
    np.testing.assert_allclose(
        _kernels.python_backend.norm_act_backward(g, fa[1], fa[2], 0.01),
        _kernels.compiled_backend.norm_act_backward(g, fb[1], fb[2], 0.01),
        rtol=1e-4,
        atol=1e-5,
    )
