import numpy as np
import pytest

from auxpose import tensor as T
from auxpose.tensor import ShapeError, Tape, Tensor

from helpers import (
    broadcast_mul_loops,
    conv2d_loops,
    finite_diff_grads,
    linear_loops,
    max_rel_err,
)


def rand(shape, seed, lo=-1.0, hi=1.0):
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.uniform(lo, hi, size=shape)


def rand_away_from_zero(shape, seed, margin=0.1):
    """Uniform magnitudes in [margin, 1] with random sign (clear of relu kinks)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    mags = rng.uniform(margin, 1.0, size=shape)
    signs = np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)
    return mags * signs


# ---------------------------------------------------------------------------
# conv2d


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.full((1, 1, 1, 1), 5.0))
        k = Tensor(np.ones((1, 1, 1, 1)))
        b = Tensor(np.zeros(1))
        out = T.conv2d(x, k, b, stride=1, padding=0)
        assert out.data.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 5.0

    def test_all_ones_summation(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        k = Tensor(np.ones((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        out = T.conv2d(x, k, b)
        assert out.data.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 9.0

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_loop_oracle(self, stride, padding):
        x = rand((2, 2, 5, 6), seed=11)
        k = rand((3, 2, 3, 3), seed=12)
        b = rand((3,), seed=13)
        out = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, padding)
        ref = conv2d_loops(x, k, b, stride, padding)
        np.testing.assert_allclose(out.data, ref, rtol=1e-12, atol=1e-12)

    def test_same_padding_preserves_extents(self):
        for ksize in (1, 3, 5):
            x = Tensor(rand((1, 2, 7, 9), seed=ksize))
            k = Tensor(rand((2, 2, ksize, ksize), seed=ksize + 50))
            b = Tensor(np.zeros(2))
            out = T.conv2d(x, k, b, stride=1, padding=(ksize - 1) // 2)
            assert out.data.shape == (1, 2, 7, 9)

    def test_channel_mismatch_rejected(self):
        x = Tensor(np.zeros((1, 3, 4, 4)))
        k = Tensor(np.zeros((2, 2, 3, 3)))
        b = Tensor(np.zeros(2))
        with pytest.raises(ShapeError, match="channels"):
            T.conv2d(x, k, b)

    def test_kernel_larger_than_input_rejected(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        k = Tensor(np.zeros((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        with pytest.raises(ShapeError, match="height"):
            T.conv2d(x, k, b)

    def test_bias_mismatch_rejected(self):
        x = Tensor(np.zeros((1, 1, 4, 4)))
        k = Tensor(np.zeros((2, 1, 3, 3)))
        b = Tensor(np.zeros(3))
        with pytest.raises(ShapeError, match="bias"):
            T.conv2d(x, k, b)

    def test_deterministic(self):
        x = Tensor(rand((2, 3, 8, 8), seed=21))
        k = Tensor(rand((4, 3, 3, 3), seed=22))
        b = Tensor(rand((4,), seed=23))
        a = T.conv2d(x, k, b, 2, 1).data
        again = T.conv2d(x, k, b, 2, 1).data
        assert a.tobytes() == again.tobytes()


# ---------------------------------------------------------------------------
# elementwise and structural ops


class TestRelu:
    def test_values(self):
        out = T.relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_all_negative(self):
        out = T.relu(Tensor(-np.ones((2, 3))))
        assert np.all(out.data == 0.0)

    def test_gradient_indicator(self):
        tape = Tape()
        x = tape.watch(Tensor([-1.0, 2.0]))
        loss = T.sum_over(T.relu(x))
        tape.backward(loss)
        np.testing.assert_array_equal(tape.grad(x), [0.0, 1.0])

    def test_gradient_zero_at_kink(self):
        tape = Tape()
        x = tape.watch(Tensor([0.0]))
        tape.backward(T.sum_over(T.relu(x)))
        np.testing.assert_array_equal(tape.grad(x), [0.0])


class TestConcatChannels:
    def test_order(self):
        a = Tensor(np.full((1, 1, 1, 1), 2.0))
        b = Tensor(np.full((1, 1, 1, 1), 3.0))
        out = T.concat_channels(a, b)
        np.testing.assert_array_equal(out.data.ravel(), [2.0, 3.0])

    def test_roundtrip_identity(self):
        a = rand((2, 3, 4, 4), seed=31)
        zeros = np.zeros((2, 2, 4, 4))
        cat = T.concat_channels(Tensor(a), Tensor(zeros))
        back = T.slice_channels(cat, 0, 3)
        np.testing.assert_array_equal(back.data, a)

    def test_complementary_slices_identity(self):
        a = rand((1, 2, 3, 3), seed=32)
        b = rand((1, 4, 3, 3), seed=33)
        cat = T.concat_channels(Tensor(a), Tensor(b))
        np.testing.assert_array_equal(T.slice_channels(cat, 0, 2).data, a)
        np.testing.assert_array_equal(T.slice_channels(cat, 2, 6).data, b)

    def test_gradient_splits(self):
        tape = Tape()
        a = tape.watch(Tensor(rand((1, 2, 2, 2), seed=34)))
        b = tape.watch(Tensor(rand((1, 3, 2, 2), seed=35)))
        tape.backward(T.sum_over(T.concat_channels(a, b)))
        np.testing.assert_array_equal(tape.grad(a), np.ones((1, 2, 2, 2)))
        np.testing.assert_array_equal(tape.grad(b), np.ones((1, 3, 2, 2)))

    def test_spatial_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="spatial"):
            T.concat_channels(Tensor(np.zeros((1, 1, 2, 2))),
                              Tensor(np.zeros((1, 1, 3, 2))))


class TestPooling:
    def test_max_pool_values(self):
        x = Tensor(np.array([[1.0, 5.0], [3.0, 2.0]]).reshape(1, 1, 2, 2))
        out = T.global_max_pool_spatial(x)
        assert out.data.reshape(()) == 5.0

    def test_max_pool_constant(self):
        out = T.global_max_pool_spatial(Tensor(np.full((1, 2, 3, 3), 7.0)))
        np.testing.assert_array_equal(out.data.ravel(), [7.0, 7.0])

    def test_max_pool_tie_goes_first_row_major(self):
        x = np.zeros((1, 1, 2, 2))
        x[0, 0] = [[4.0, 4.0], [1.0, 4.0]]
        tape = Tape()
        xt = tape.watch(Tensor(x))
        tape.backward(T.sum_over(T.global_max_pool_spatial(xt)))
        np.testing.assert_array_equal(
            tape.grad(xt)[0, 0], [[1.0, 0.0], [0.0, 0.0]]
        )

    def test_max_pool_gradient_vs_finite_diff(self):
        x = rand((2, 3, 4, 4), seed=41)
        tape = Tape()
        xt = tape.watch(Tensor(x))
        tape.backward(T.sum_over(T.square(T.global_max_pool_spatial(xt))))
        analytic = tape.grad(xt)

        def f():
            return float(np.sum(np.square(
                T.global_max_pool_spatial(Tensor(x)).data)))

        numeric = finite_diff_grads(f, [x])[0]
        assert max_rel_err(analytic, numeric) < 1e-6

    def test_avg_pool_channels(self):
        x = np.stack([np.full((1, 1), 2.0), np.full((1, 1), 4.0)])[None]
        out = T.global_avg_pool_channels(Tensor(x))
        assert out.data.reshape(()) == 3.0

    def test_avg_pool_identical_channels(self):
        one = rand((1, 1, 3, 3), seed=42)
        x = np.concatenate([one] * 4, axis=1)
        out = T.global_avg_pool_channels(Tensor(x))
        np.testing.assert_allclose(out.data, one, rtol=0, atol=1e-15)

    def test_avg_pool_gradient_is_inverse_channel_count(self):
        x = rand((1, 5, 2, 2), seed=43)
        tape = Tape()
        xt = tape.watch(Tensor(x))
        tape.backward(T.sum_over(T.global_avg_pool_channels(xt)))
        np.testing.assert_allclose(tape.grad(xt), np.full(x.shape, 0.2))


class TestBroadcastMul:
    def test_identity_by_ones(self):
        a = rand((2, 3, 4, 4), seed=51)
        out = T.broadcast_mul(Tensor(a), Tensor(np.ones((2, 3, 1, 1))))
        np.testing.assert_array_equal(out.data, a)

    def test_zeros_annihilate(self):
        a = rand((2, 3, 4, 4), seed=52)
        out = T.broadcast_mul(Tensor(a), Tensor(np.zeros((2, 1, 4, 4))))
        assert np.all(out.data == 0.0)

    @pytest.mark.parametrize("bshape", [(2, 3, 1, 1), (2, 1, 4, 5), (1, 1, 1, 1)])
    def test_matches_loop_oracle(self, bshape):
        a = rand((2, 3, 4, 5), seed=53)
        b = rand(bshape, seed=54)
        out = T.broadcast_mul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, broadcast_mul_loops(a, b), rtol=1e-15)

    def test_non_broadcastable_rejected(self):
        with pytest.raises(ShapeError, match="broadcastable"):
            T.broadcast_mul(Tensor(np.zeros((1, 2, 3, 3))),
                            Tensor(np.zeros((1, 2, 4, 4))))

    def test_gradient_sums_over_broadcast_axes(self):
        a = rand((1, 2, 2, 2), seed=55)
        b = rand((1, 2, 1, 1), seed=56)
        tape = Tape()
        bt = tape.watch(Tensor(b))
        tape.backward(T.sum_over(T.broadcast_mul(Tensor(a), bt)))
        expected = a.sum(axis=(2, 3), keepdims=True)
        np.testing.assert_allclose(tape.grad(bt), expected, rtol=1e-15)


class TestUpsampleNearest:
    def test_factor_one_identity(self):
        a = rand((1, 2, 3, 3), seed=61)
        np.testing.assert_array_equal(T.upsample_nearest(Tensor(a), 1).data, a)

    def test_replication_pattern(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = T.upsample_nearest(x, 2)
        expected = np.array([
            [1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]
        ], dtype=float)
        np.testing.assert_array_equal(out.data[0, 0], expected)

    def test_mean_downsample_inverts(self):
        a = rand((2, 3, 4, 4), seed=62)
        up = T.upsample_nearest(Tensor(a), 3).data
        down = up.reshape(2, 3, 4, 3, 4, 3).mean(axis=(3, 5))
        np.testing.assert_allclose(down, a, rtol=1e-15)

    def test_gradient_sums_replicas(self):
        a = rand((1, 1, 2, 2), seed=63)
        tape = Tape()
        at = tape.watch(Tensor(a))
        tape.backward(T.sum_over(T.upsample_nearest(at, 2)))
        np.testing.assert_array_equal(tape.grad(at), np.full((1, 1, 2, 2), 4.0))


class TestLinear:
    def test_identity_weight(self):
        x = rand((3, 4), seed=71)
        out = T.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_weight_bias_rows(self):
        x = rand((3, 4), seed=72)
        bias = np.array([1.0, 2.0])
        out = T.linear(Tensor(x), Tensor(np.zeros((2, 4))), Tensor(bias))
        np.testing.assert_array_equal(out.data, np.tile(bias, (3, 1)))

    def test_matches_loop_oracle(self):
        x = rand((4, 5), seed=73)
        w = rand((3, 5), seed=74)
        b = rand((3,), seed=75)
        out = T.linear(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, linear_loops(x, w, b), rtol=1e-13)

    def test_inner_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="inner"):
            T.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))),
                     Tensor(np.zeros(4)))


# ---------------------------------------------------------------------------
# tape / backward


class TestTape:
    def test_grad_of_sum_is_ones(self):
        x = rand((2, 3), seed=81)
        tape = Tape()
        xt = tape.watch(Tensor(x))
        tape.backward(T.sum_over(xt))
        np.testing.assert_array_equal(tape.grad(xt), np.ones((2, 3)))

    def test_grad_of_sum_of_squares(self):
        tape = Tape()
        xt = tape.watch(Tensor([1.0, 2.0]))
        tape.backward(T.sum_over(T.mul(xt, xt)))
        np.testing.assert_array_equal(tape.grad(xt), [2.0, 4.0])

    def test_loss_gradient_wrt_itself_is_one(self):
        tape = Tape()
        xt = tape.watch(Tensor([3.0]))
        loss = T.sum_over(xt)
        tape.backward(loss)
        assert tape.grad(loss) == 1.0

    def test_unreachable_leaf_gets_zero(self):
        tape = Tape()
        used = tape.watch(Tensor([1.0, 1.0]))
        unused = tape.watch(Tensor(np.ones((2, 2))))
        tape.backward(T.sum_over(used))
        np.testing.assert_array_equal(tape.grad(unused), np.zeros((2, 2)))

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        xt = tape.watch(Tensor([1.0, 2.0]))
        with pytest.raises(ShapeError, match="scalar"):
            tape.backward(xt)

    def test_topological_order(self):
        tape = Tape()
        a = tape.watch(Tensor([1.0]))
        b = tape.watch(Tensor([2.0]))
        c = T.mul(T.add(a, b), b)
        _ = T.sum_over(c)
        for nid, node in enumerate(tape._nodes):
            for input_id in node.inputs:
                assert input_id is None or input_id < nid

    def test_mixed_tapes_rejected(self):
        t1, t2 = Tape(), Tape()
        a = t1.watch(Tensor([1.0]))
        b = t2.watch(Tensor([1.0]))
        with pytest.raises(ValueError, match="tape"):
            T.add(a, b)

    def test_reused_node_accumulates(self):
        tape = Tape()
        xt = tape.watch(Tensor([3.0]))
        y = T.add(xt, xt)
        tape.backward(T.sum_over(y))
        np.testing.assert_array_equal(tape.grad(xt), [2.0])

    def test_constant_inputs_get_no_gradient(self):
        tape = Tape()
        xt = tape.watch(Tensor([2.0]))
        const = Tensor([5.0])
        tape.backward(T.sum_over(T.mul(xt, const)))
        np.testing.assert_array_equal(tape.grad(xt), [5.0])
        assert const.node_id is None

    def test_nonfinite_construction_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            Tensor([np.nan])


# ---------------------------------------------------------------------------
# finite-difference check over every differentiable primitive


def _fd_case(name):
    """Return (forward_fn(tensors) -> scalar Tensor, seeded input arrays)."""
    if name == "conv2d":
        arrs = [rand((1, 2, 5, 5), 101), rand((3, 2, 3, 3), 102), rand((3,), 103)]
        fn = lambda t: T.sum_over(T.square(T.conv2d(t[0], t[1], t[2], 2, 1)))
    elif name == "linear":
        arrs = [rand((2, 4), 111), rand((3, 4), 112), rand((3,), 113)]
        fn = lambda t: T.sum_over(T.square(T.linear(t[0], t[1], t[2])))
    elif name == "relu":
        arrs = [rand_away_from_zero((2, 3, 3), 121)]
        fn = lambda t: T.sum_over(T.square(T.relu(t[0])))
    elif name == "mul":
        arrs = [rand((2, 3, 2, 2), 131), rand((2, 3, 1, 1), 132)]
        fn = lambda t: T.sum_over(T.square(T.mul(t[0], t[1])))
    elif name == "add":
        arrs = [rand((2, 3), 141), rand((1, 3), 142)]
        fn = lambda t: T.sum_over(T.square(T.add(t[0], t[1])))
    elif name == "sub":
        arrs = [rand((2, 3), 143), rand((2, 3), 144)]
        fn = lambda t: T.sum_over(T.square(T.sub(t[0], t[1])))
    elif name == "concat":
        arrs = [rand((1, 2, 2, 2), 151), rand((1, 3, 2, 2), 152)]
        fn = lambda t: T.sum_over(T.square(T.concat_channels(t[0], t[1])))
    elif name == "slice":
        arrs = [rand((1, 4, 2, 2), 153)]
        fn = lambda t: T.sum_over(T.square(T.slice_channels(t[0], 1, 3)))
    elif name == "gmp":
        arrs = [rand((2, 2, 3, 3), 161)]
        fn = lambda t: T.sum_over(T.square(T.global_max_pool_spatial(t[0])))
    elif name == "gap":
        arrs = [rand((2, 3, 2, 2), 162)]
        fn = lambda t: T.sum_over(T.square(T.global_avg_pool_channels(t[0])))
    elif name == "upsample":
        arrs = [rand((1, 2, 2, 2), 171)]
        fn = lambda t: T.sum_over(T.square(T.upsample_nearest(t[0], 2)))
    elif name == "absolute":
        arrs = [rand_away_from_zero((3, 3), 181)]
        fn = lambda t: T.sum_over(T.square(T.absolute(t[0])))
    elif name == "sqrt":
        arrs = [rand((3, 3), 182, lo=0.5, hi=2.0)]
        fn = lambda t: T.sum_over(T.square(T.sqrt(t[0])))
    elif name == "square":
        arrs = [rand((3, 3), 183)]
        fn = lambda t: T.sum_over(T.square(T.square(t[0])))
    elif name == "mean":
        arrs = [rand((2, 3, 4), 184)]
        fn = lambda t: T.sum_over(T.square(T.mean_over(t[0], axes=(1, 2))))
    elif name == "reshape":
        arrs = [rand((2, 6), 185)]
        fn = lambda t: T.sum_over(T.square(T.reshape(t[0], (3, 4))))
    elif name == "neg":
        arrs = [rand((2, 3), 186)]
        fn = lambda t: T.sum_over(T.square(T.neg(t[0])))
    elif name == "sum":
        arrs = [rand((2, 3, 4), 187)]
        fn = lambda t: T.sum_over(T.square(T.sum_over(t[0], axes=(0, 2))))
    elif name == "flatten":
        arrs = [rand((2, 3, 2, 2), 188)]
        fn = lambda t: T.sum_over(T.square(T.flatten_batch(t[0])))
    else:
        raise KeyError(name)
    return fn, arrs


ALL_FD_OPS = ["conv2d", "linear", "relu", "mul", "add", "sub", "neg",
              "concat", "slice", "gmp", "gap", "upsample", "absolute",
              "sqrt", "square", "sum", "mean", "reshape", "flatten"]


@pytest.mark.parametrize("op_name", ALL_FD_OPS)
def test_gradients_match_finite_differences(op_name):
    fn, arrays = _fd_case(op_name)
    tape = Tape()
    tensors = [tape.watch(Tensor(a)) for a in arrays]
    tape.backward(fn(tensors))
    analytic = [tape.grad(t) for t in tensors]

    def scalar():
        return fn([Tensor(a) for a in arrays]).item()

    numeric = finite_diff_grads(scalar, arrays, step=1e-5)
    for a, n in zip(analytic, numeric):
        assert max_rel_err(a, n) < 1e-4
