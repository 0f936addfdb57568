"""
Tests for the tensor core and the differentiation tape
"""
# Standard libraries
import threading

# Third-party libraries
import numpy as np
import pytest

# Local imports
from ..tensor import (Tensor, Tape, Rng, build_tensor, elementwise, matmul, reshape, concat,
                      reduce_sum, reduce_mean, softmax, normalize, backward, finite_diff_check,
                      sigmoid, leaky_relu, shape_ops, square, current_tape, set_num_threads,
                      get_num_threads, pad)
from ..errors import ShapeError, DomainError, DegenerateInputError, ContractError
from ..loss import dice_loss


class TestRng(object):
    """
    """
    def test_same_seed_same_stream(self):
        assert np.array_equal(Rng(3).normal(0, 1, (5,)), Rng(3).normal(0, 1, (5,)))

    def test_state_round_trip(self):
        rng = Rng(11)
        rng.uniform(0, 1, (4,))
        state = rng.state
        first = rng.normal(0, 1, (6,))
        other = Rng(0)
        other.state = state
        assert np.array_equal(other.normal(0, 1, (6,)), first)

    def test_foreign_state_rejected(self):
        with pytest.raises(ContractError):
            Rng(0).state = {'bit_generator': 'MT19937'}

    def test_negative_seed(self):
        with pytest.raises(ContractError):
            Rng(-1)

    def test_derive(self):
        assert Rng(5).derive(3).seed == 8


class TestBuildTensor(object):
    """
    """
    def test_zeros(self):
        t = build_tensor('zeros', [2, 3])
        assert t.shape == (2, 3)
        assert np.all(t.data == 0.0)

    def test_full(self):
        assert np.array_equal(build_tensor('full', [4], value=1.5).data, [1.5, 1.5, 1.5, 1.5])

    def test_normal_moments(self):
        t = build_tensor('normal', [10 ** 5], 'f64', rng=Rng(7))
        assert abs(t.data.mean()) < 0.02
        assert abs(t.data.std() - 1.0) < 0.02

    def test_zero_extent(self):
        with pytest.raises(ShapeError):
            build_tensor('zeros', [2, 0])

    def test_random_without_rng(self):
        with pytest.raises(ContractError):
            build_tensor('uniform', [2])

    def test_immutable(self):
        t = build_tensor('zeros', [3])
        with pytest.raises(ValueError):
            t.data[0] = 1.0


class TestElementwise(object):
    """
    """
    def test_sigmoid_zero(self):
        assert sigmoid(Tensor([0.0], 'f64')).item() == 0.5

    def test_leaky_relu(self):
        assert leaky_relu(Tensor([-2.0], 'f64'), 0.01).item() == pytest.approx(-0.02)

    def test_add(self):
        out = elementwise('add', Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        assert np.array_equal(out.data, [4.0, 6.0])

    def test_broadcast_extent_one(self):
        out = Tensor(np.ones((2, 3))) + Tensor([[1.0, 2.0, 3.0]])
        assert np.array_equal(out.data, [[2, 3, 4], [2, 3, 4]])

    def test_broadcast_rank_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones(3))

    def test_log_non_positive(self):
        with pytest.raises(DomainError):
            elementwise('log', Tensor([1.0, 0.0]))

    def test_divide_by_zero(self):
        with pytest.raises(DomainError):
            Tensor([1.0]) / Tensor([0.0])

    def test_mixed_dtypes(self):
        with pytest.raises(ContractError):
            Tensor([1.0], 'f32') + Tensor([1.0], 'f64')

    def test_unknown_op(self):
        with pytest.raises(ContractError):
            elementwise('tanh', Tensor([1.0]))


class TestMatmul(object):
    """
    """
    def test_identity(self):
        a = Tensor(np.arange(9.0).reshape(3, 3), 'f64')
        assert np.array_equal(matmul(Tensor(np.eye(3), 'f64'), a).data, a.data)

    def test_hand_product(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]], 'f64'), Tensor([[5.0], [6.0]], 'f64'))
        assert np.array_equal(out.data, [[17.0], [39.0]])

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient_is_ones_times_b_transposed(self):
        rng = Rng(1)
        a = Tensor(rng.normal(0, 1, (2, 3)), 'f64', requires_grad=True)
        b = Tensor(rng.normal(0, 1, (3, 4)), 'f64')
        with Tape():
            loss = reduce_sum(matmul(a, b))
        grads = backward(loss)
        assert np.allclose(grads[a].data, np.ones((2, 4)) @ b.data.T)


class TestShapeOps(object):
    """
    """
    def test_reshape_row_major(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert np.array_equal(reshape(x, (3, 2)).data.ravel(), np.arange(6.0))

    def test_reshape_count_mismatch(self):
        with pytest.raises(ShapeError):
            reshape(Tensor(np.ones((2, 3))), (4, 2))

    def test_concat(self):
        out = concat([Tensor(np.ones((2, 1))), Tensor(np.zeros((2, 1)))], 1)
        assert out.shape == (2, 2)

    def test_reduce_mean(self):
        assert reduce_mean(Tensor([1.0, 2.0, 3.0, 6.0], 'f64')).item() == 3.0

    def test_dispatch(self):
        assert shape_ops('reduce_sum', Tensor([1.0, 2.0])).item() == 3.0
        with pytest.raises(ContractError):
            shape_ops('roll', Tensor([1.0]))

    def test_pad_gradient(self):
        x = Tensor(np.ones((2, 2)), 'f64', requires_grad=True)
        with Tape():
            loss = reduce_sum(square(pad(x, ((1, 1), (0, 2)))))
        assert np.array_equal(backward(loss)[x].data, 2 * np.ones((2, 2)))

    def test_slice_gradient(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), 'f64', requires_grad=True)
        with Tape():
            loss = reduce_sum(x[:, 1:])
        assert np.array_equal(backward(loss)[x].data, [[0, 1, 1], [0, 1, 1]])


class TestSoftmax(object):
    """
    """
    @pytest.mark.parametrize('values, expected', [
        ([0.0, 0.0], [0.5, 0.5]),
        ([1000.0, 1000.0], [0.5, 0.5]),
        ([0.0, np.log(3.0)], [0.25, 0.75]),
    ])
    def test_values(self, values, expected):
        assert np.allclose(softmax(Tensor(values, 'f64')).data, expected)

    @pytest.mark.parametrize('dtype', ['f32', 'f64'])
    def test_wide_logits(self, dtype):
        logits = Rng(11).uniform(-1e4, 1e4, (50, 7))
        out = softmax(Tensor(logits, dtype), -1).data
        assert np.all(np.isfinite(out))
        assert np.all(out >= 0)
        assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)


class TestNormalize(object):
    """
    """
    def test_zero_variance_without_eps(self):
        with pytest.raises(DegenerateInputError):
            normalize(Tensor(np.ones((1, 4)), 'f64'), (1,), eps=0)

    def test_constant_with_eps(self):
        out = normalize(Tensor(np.full((1, 4), 3.0), 'f64'), (1,))
        assert np.array_equal(out.data, np.zeros((1, 4)))


class TestBackward(object):
    """
    """
    def test_sum(self):
        x = Tensor(np.arange(5.0), 'f64', requires_grad=True)
        with Tape():
            loss = reduce_sum(x)
        assert np.array_equal(backward(loss)[x].data, np.ones(5))

    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0], 'f64', requires_grad=True)
        with Tape():
            loss = reduce_sum(x * x)
        assert np.array_equal(backward(loss)[x].data, [2.0, 4.0])

    def test_fan_out_accumulates(self):
        x = Tensor([3.0], 'f64', requires_grad=True)
        with Tape():
            loss = reduce_sum(x * x + x)
        assert backward(loss)[x].item() == 7.0

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], 'f64', requires_grad=True)
        with Tape():
            y = x * 2.0
        with pytest.raises(ContractError):
            backward(y)

    def test_unrecorded_loss(self):
        with pytest.raises(ContractError):
            backward(Tensor(1.0))

    def test_unreached_tensor_gets_zeros(self):
        x = Tensor([1.0], 'f64', requires_grad=True)
        unused = Tensor([5.0, 6.0], 'f64', requires_grad=True)
        with Tape():
            loss = reduce_sum(x * 3.0)
        grads = backward(loss, wrt=[x, unused])
        assert np.array_equal(grads[unused].data, [0.0, 0.0])

    def test_no_recording_without_tape(self):
        x = Tensor([1.0], 'f64', requires_grad=True)
        y = x * 2.0
        assert y.node_id is None
        assert current_tape() is None

    def test_tapes_are_thread_local(self):
        seen = []
        with Tape():
            thread = threading.Thread(target=lambda: seen.append(current_tape()))
            thread.start()
            thread.join()
        assert seen == [None]


class TestFiniteDiffCheck(object):
    """
    """
    def test_sum_of_squares(self):
        point = Tensor(Rng(0).normal(0, 1, (6,)), 'f64')
        assert finite_diff_check(lambda x: reduce_sum(square(x)), point) < 1e-9

    def test_dice_of_sigmoid(self):
        rng = Rng(2)
        point = Tensor(rng.normal(0, 1, (1, 2, 2, 2, 2)), 'f64')
        target = (rng.random((1, 2, 2, 2, 2)) > 0.5).astype(np.float64)
        assert finite_diff_check(lambda x: dice_loss(sigmoid(x), target), point) < 1e-6

    def test_named_point(self):
        point = {'a': Tensor([1.0, 2.0], 'f64'), 'b': Tensor([3.0], 'f64')}
        error = finite_diff_check(lambda p: reduce_sum(p['a'] * p['b']), point,
                                  coordinates=[('a', 1), ('b', 0)])
        assert error < 1e-9

    def test_nondeterministic_function(self):
        rng = Rng(4)

        def noisy(x):
            return reduce_sum(x * Tensor(rng.normal(0, 1, (3,)), 'f64'))
        with pytest.raises(ContractError):
            finite_diff_check(noisy, Tensor(np.ones(3), 'f64'))


def test_num_threads():
    set_num_threads(3)
    assert get_num_threads() == 3
    set_num_threads(0)
    assert get_num_threads() == 1
