import numpy as np
import pytest

from lsfd import tensor as T
from lsfd.tensor import GraphError, ShapeError, Tensor


def leaf(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class TestElementwise:
    def test_add(self):
        out = T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        assert np.array_equal(out.data, [4.0, 6.0])

    def test_relu(self):
        out = T.relu(Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_mul_gradient_matches_finite_differences(self):
        # d/da of mul(a,b) at a=[2], b=[5] -> grad_a=[5]
        a = leaf([2.0])
        b = Tensor([5.0])
        T.backward(T.sum_all(T.mul(a, b)))
        assert np.allclose(a.grad, [5.0])
        err = T.grad_check(lambda x: T.sum_all(T.mul(x, b)), leaf([2.0]), step=1e-5)
        assert err < 1e-9

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as ei:
            T.add(Tensor([1.0, 2.0]), Tensor([[1.0], [2.0]]))
        assert "(2,)" in str(ei.value) and "(2, 1)" in str(ei.value)

    def test_sigmoid_stable_at_extremes(self):
        out = T.sigmoid(Tensor([-1000.0, 0.0, 1000.0]))
        assert np.allclose(out.data, [0.0, 0.5, 1.0])


class TestMatmul:
    def test_identity(self):
        m = [[1.0, 2.0], [3.0, 4.0]]
        out = T.matmul(Tensor(np.eye(2)), Tensor(m))
        assert np.array_equal(out.data, m)

    def test_hand_product(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        assert np.array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])

    def test_zeros_annihilate(self):
        out = T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.arange(12.0).reshape(3, 4)))
        assert out.shape == (2, 4) and not out.data.any()

    def test_inner_extent_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


class TestConv3d:
    def test_scalar_kernel_scales(self):
        x = Tensor(np.array([[[[3.0]]]]))
        k = Tensor(np.full((1, 1, 1, 1, 1), 2.0))
        out = T.conv3d(x, k)
        assert np.array_equal(out.data, [[[[6.0]]]])

    def test_all_ones_sum(self):
        x = Tensor(np.ones((1, 2, 2, 2)))
        k = Tensor(np.ones((1, 1, 2, 2, 2)))
        out = T.conv3d(x, k)
        assert out.shape == (1, 1, 1, 1)
        assert out.data.reshape(()) == 8.0

    def test_identity_kernel_is_identity(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 4, 5, 5))
        k = np.zeros((3, 3, 1, 1, 1))
        for c in range(3):
            k[c, c, 0, 0, 0] = 1.0
        out = T.conv3d(Tensor(x), Tensor(k))
        assert np.array_equal(out.data, x)

    def test_kernel_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(1, 4, 4, 4)))
        k0 = rng.normal(size=(2, 1, 3, 3, 3))
        err = T.grad_check(
            lambda k: T.sum_all(T.tanh(T.conv3d(x, k, stride=(1, 1, 1), pad=(1, 1, 1)))),
            leaf(k0), step=1e-5)
        assert err < 1e-4

    def test_input_gradient_strided(self):
        rng = np.random.default_rng(2)
        k = Tensor(rng.normal(size=(2, 2, 2, 2, 2)))
        err = T.grad_check(
            lambda x: T.sum_all(T.tanh(T.conv3d(x, k, stride=(2, 2, 2), pad=(1, 0, 1)))),
            leaf(rng.normal(size=(2, 4, 4, 5))), step=1e-5)
        assert err < 1e-4

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(3)
        xs = rng.normal(size=(3, 2, 4, 4, 4))
        k = Tensor(rng.normal(size=(3, 2, 3, 3, 3)))
        batched = T.conv3d(Tensor(xs), k, pad=(1, 1, 1))
        singles = [T.conv3d(Tensor(xs[i]), k, pad=(1, 1, 1)).data for i in range(3)]
        assert np.allclose(batched.data, np.stack(singles), atol=1e-12)

    def test_nonpositive_output_extent(self):
        with pytest.raises(ShapeError, match="nonpositive"):
            T.conv3d(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((1, 1, 3, 1, 1))))


class TestPooling:
    def test_global_avg_of_constant(self):
        out = T.global_avg_pool3d(Tensor(np.full((3, 2, 4, 4), 0.7)))
        assert np.allclose(out.data, [0.7, 0.7, 0.7])

    def test_avg_hand_value(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = T.avg_pool3d(x, window=(1, 2, 2))
        assert out.data.reshape(()) == 2.5

    def test_global_avg_gradient_uniform(self):
        x = leaf(np.arange(24.0).reshape(2, 2, 2, 3))
        T.backward(T.sum_all(T.global_avg_pool3d(x)))
        assert np.allclose(x.grad, 1.0 / 12.0)

    def test_non_tiling_window_rejected(self):
        with pytest.raises(ShapeError, match="tile"):
            T.avg_pool3d(Tensor(np.ones((1, 3, 4, 4))), window=(2, 2, 2))

    def test_avg_gradient(self):
        rng = np.random.default_rng(4)
        err = T.grad_check(
            lambda x: T.sum_all(T.tanh(T.avg_pool3d(x, window=(1, 2, 2)))),
            leaf(rng.normal(size=(2, 2, 4, 4))), step=1e-5)
        assert err < 1e-4


class TestShapeOps:
    def test_concat_slice_round_trip(self):
        joined = T.concat_lastdim([Tensor([1.0, 2.0]), Tensor([3.0])])
        assert np.array_equal(joined.data, [1.0, 2.0, 3.0])
        assert np.array_equal(T.slice_lastdim(joined, 0, 2).data, [1.0, 2.0])

    def test_sum_all(self):
        assert T.sum_all(Tensor([1.0, 2.0, 3.0])).item() == 6.0

    def test_slice_gradient_zero_outside(self):
        x = leaf([1.0, 2.0, 3.0, 4.0])
        T.backward(T.sum_all(T.slice_lastdim(x, 1, 3)))
        assert np.array_equal(x.grad, [0.0, 1.0, 1.0, 0.0])

    def test_slice_out_of_bounds(self):
        with pytest.raises(ShapeError):
            T.slice_lastdim(Tensor([1.0, 2.0]), 1, 3)

    def test_take_rows_accumulates_repeats(self):
        x = leaf(np.arange(6.0).reshape(3, 2))
        out = T.take_rows(x, [0, 0, 2])
        assert np.array_equal(out.data, [[0.0, 1.0], [0.0, 1.0], [4.0, 5.0]])
        T.backward(T.sum_all(out))
        assert np.array_equal(x.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])

    def test_reshape_round_trip_gradient(self):
        x = leaf(np.arange(6.0))
        T.backward(T.sum_all(T.reshape(x, (2, 3))))
        assert np.array_equal(x.grad, np.ones(6))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        a = leaf([1.0, 2.0])
        T.backward(T.sum_all(a))
        assert np.array_equal(a.grad, [1.0, 1.0])

    def test_square_gradient(self):
        a = leaf([3.0])
        T.backward(T.sum_all(T.mul(a, a)))
        assert np.allclose(a.grad, [6.0])

    def test_two_backward_calls_accumulate(self):
        a = leaf([1.0, 2.0])
        loss = T.sum_all(T.mul(a, a))
        T.backward(loss)
        first = a.grad.copy()
        T.backward(loss)
        assert np.array_equal(a.grad, 2.0 * first)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(GraphError):
            T.backward(leaf([1.0, 2.0]))

    def test_independent_subgraphs_order_invariant(self):
        a = leaf([1.0, 2.0])
        b = leaf([3.0, 4.0])
        la = T.sum_all(T.mul(a, a))
        lb = T.sum_all(T.tanh(b))
        T.backward(la)
        T.backward(lb)
        ga, gb = a.grad.copy(), b.grad.copy()
        a2, b2 = leaf([1.0, 2.0]), leaf([3.0, 4.0])
        T.backward(T.sum_all(T.tanh(b2)))
        T.backward(T.sum_all(T.mul(a2, a2)))
        assert np.array_equal(ga, a2.grad) and np.array_equal(gb, b2.grad)

    def test_untracked_inputs_build_no_graph(self):
        out = T.mul(Tensor([1.0]), Tensor([2.0]))
        assert out._grad_fn is None and not out.requires_grad

    def test_detach_blocks_gradient(self):
        a = leaf([2.0])
        d = T.mul(a, a).detach()
        T.backward(T.sum_all(T.mul(d, d)))
        assert a.grad is None


class TestGradCheck:
    def test_linear_is_exact(self):
        w = Tensor(np.random.default_rng(5).normal(size=(4,)))
        err = T.grad_check(lambda x: T.sum_all(T.mul(x, w)),
                           leaf(np.random.default_rng(6).normal(size=4)))
        assert err < 1e-9

    def test_constant_function_zero_error(self):
        err = T.grad_check(lambda x: Tensor(1.5), leaf(np.zeros(3)))
        assert err == 0.0

    def test_two_layer_tanh_network(self):
        rng = np.random.default_rng(7)
        w1 = Tensor(rng.normal(size=(5, 4)))
        w2 = Tensor(rng.normal(size=(4, 1)))

        def f(x):
            return T.sum_all(T.matmul(T.tanh(T.matmul(x, w1)), w2))

        err = T.grad_check(f, leaf(rng.normal(size=(2, 5))), step=1e-5)
        assert err < 1e-4


UNARY_OPS = [
    ("relu", T.relu), ("sigmoid", T.sigmoid), ("tanh", T.tanh),
    ("exp", T.exp), ("neg", T.neg),
]


@pytest.mark.parametrize("name,op", UNARY_OPS)
def test_unary_grad_check_many_instances(name, op):
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(20):
        x0 = rng.normal(size=rng.integers(1, 6, size=2))
        if name == "relu":
            # keep arguments away from the kink, where FD is invalid
            x0 = x0 + np.sign(x0) * 0.1
        if name == "exp":
            # avoid the saturated-tanh regime where FD loses all precision
            x0 = np.clip(x0, -1.5, 1.5)
        err = T.grad_check(lambda x: T.sum_all(T.tanh(op(x))), leaf(x0), step=1e-5)
        assert err < 1e-4, f"{name} instance failed with {err}"


@pytest.mark.parametrize("name", ["log", "sqrt", "div"])
def test_positive_domain_grad_check(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(20):
        x0 = rng.uniform(0.5, 3.0, size=(3, 2))
        if name == "div":
            b = Tensor(rng.uniform(0.5, 3.0, size=(3, 2)))
            fn = lambda x: T.sum_all(T.div(x, b))
        elif name == "log":
            fn = lambda x: T.sum_all(T.log(x))
        else:
            fn = lambda x: T.sum_all(T.sqrt(x))
        assert T.grad_check(fn, leaf(x0), step=1e-5) < 1e-4


@pytest.mark.parametrize("op", ["bias_add", "channel_map", "normalize_rows",
                                "sum_axis", "transpose2d", "concat"])
def test_structured_op_grad_check(op):
    rng = np.random.default_rng(hash(op) % 2**32)
    for _ in range(20):
        if op == "bias_add":
            b = leaf(rng.normal(size=3))
            x = Tensor(rng.normal(size=(2, 3, 4)))
            err = T.grad_check(lambda t: T.sum_all(T.tanh(T.bias_add(x, t, axis=1))), b)
        elif op == "channel_map":
            w = leaf(rng.normal(size=(4, 3)))
            x = Tensor(rng.normal(size=(2, 3, 5)))
            err = T.grad_check(lambda t: T.sum_all(T.tanh(T.channel_map(x, t))), w)
        elif op == "normalize_rows":
            x0 = rng.normal(size=(3, 4)) + 2.0
            err = T.grad_check(lambda t: T.sum_all(T.tanh(T.normalize_rows(t))), leaf(x0))
        elif op == "sum_axis":
            err = T.grad_check(lambda t: T.sum_all(T.tanh(T.sum_axis(t, axis=1))),
                               leaf(rng.normal(size=(2, 3, 2))))
        elif op == "transpose2d":
            w = Tensor(rng.normal(size=(3, 2)))
            err = T.grad_check(lambda t: T.sum_all(T.matmul(T.transpose2d(t), w)),
                               leaf(rng.normal(size=(3, 4))))
        else:
            other = Tensor(rng.normal(size=(2, 2)))
            err = T.grad_check(
                lambda t: T.sum_all(T.tanh(T.concat([t, other], axis=1))),
                leaf(rng.normal(size=(2, 3))))
        assert err < 1e-4


def test_normalize_rows_zero_row_rejected():
    with pytest.raises(ValueError, match="zero-norm"):
        T.normalize_rows(Tensor(np.array([[1.0, 0.0], [0.0, 0.0]])))
