import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from evsam.nn import functional as F
from evsam.nn.gradcheck import grad_check
from evsam.nn.tensor import (NonFiniteError, Tape, Tensor, add, backward, binary, concat, div, exp, getitem,
                             log_sigmoid, matmul, mean, mul, power, record_macs, relu, reshape, sigmoid, stack,
                             sub, sum_, transpose, unary)


def leaf(values):
    return Tensor(np.asarray(values, dtype=np.float32), requires_grad=True)


class TestUnary:
    def test_relu(self):
        np.testing.assert_array_equal(unary("relu", Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_sigmoid_zero(self):
        assert unary("sigmoid", Tensor([0.0])).data[0] == 0.5

    def test_relu_gradient_is_zero_left_of_origin(self):
        x = leaf([-1.0, 2.0])
        with Tape() as tape:
            y = sum_(relu(x))
        tape.backward(y)
        np.testing.assert_array_equal(x.grad, [0, 1])

    def test_relu_subgradient_at_zero(self):
        x = leaf([0.0])
        with Tape() as tape:
            y = sum_(relu(x))
        tape.backward(y)
        assert x.grad[0] == 0

    def test_exp_and_neg(self):
        np.testing.assert_allclose(unary("exp", Tensor([0.0, 1.0])).data, [1, np.e], rtol=1e-6)
        np.testing.assert_array_equal(unary("neg", Tensor([1.0, -2.0])).data, [-1, 2])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            unary("tanh", Tensor([0.0]))

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_input_rejected(self, bad):
        with pytest.raises(NonFiniteError):
            relu(Tensor([1.0, bad]))

    def test_overflow_is_an_error(self):
        with pytest.raises(NonFiniteError):
            exp(Tensor([1000.0]))

    def test_sigmoid_is_stable_for_large_inputs(self):
        out = sigmoid(Tensor([-200.0, 200.0])).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_log_sigmoid_matches_direct_form(self):
        x = np.linspace(-8, 8, 17)
        np.testing.assert_allclose(log_sigmoid(Tensor(x)).data, -np.log1p(np.exp(-x)), rtol=1e-5)


class TestBinary:
    def test_add(self):
        np.testing.assert_array_equal(binary("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4, 6])

    def test_mul(self):
        np.testing.assert_array_equal(binary("mul", Tensor([2.0, 3.0]), Tensor([0.0, 1.0])).data, [0, 3])

    def test_div_by_zero(self):
        with pytest.raises(ZeroDivisionError):
            binary("div", Tensor([1.0]), Tensor([0.0]))

    def test_incompatible_shapes(self):
        with pytest.raises(ValueError):
            add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    def test_singleton_broadcast_and_gradient_reduction(self):
        a = leaf(np.ones((2, 3)))
        b = leaf(np.ones((1, 3)))
        with Tape() as tape:
            y = sum_(mul(a, b))
        tape.backward(y)
        assert a.grad.shape == (2, 3) and b.grad.shape == (1, 3)
        np.testing.assert_array_equal(b.grad, [[2, 2, 2]])

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float32, (3, 4), elements=st.floats(-100, 100, width=32)),
           hnp.arrays(np.float32, (1, 4), elements=st.floats(-100, 100, width=32)))
    def test_commutativity_under_broadcast(self, a, b):
        ta, tb = Tensor(a), Tensor(b)
        np.testing.assert_array_equal(add(ta, tb).data, add(tb, ta).data)
        np.testing.assert_array_equal(mul(ta, tb).data, mul(tb, ta).data)
        np.testing.assert_array_equal(sub(ta, tb).data, -sub(tb, ta).data)


class TestMatmul:
    def test_identity(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), Tensor(m)).data, m)

    def test_hand_expansion(self):
        assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradient_of_sum(self):
        b = np.random.default_rng(0).standard_normal((3, 4))
        assert grad_check(lambda a: sum_(matmul(a, Tensor(b))), np.random.default_rng(1).standard_normal((2, 3))) <= 1e-3

    def test_repeatable_bitwise(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((17, 33)), rng.standard_normal((33, 9))
        assert matmul(Tensor(a), Tensor(b)).data.tobytes() == matmul(Tensor(a), Tensor(b)).data.tobytes()

    def test_macs_are_logged(self):
        with record_macs() as log:
            matmul(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((2, 4, 5))))
        assert log == [("matmul", 2 * 3 * 4 * 5)]


class TestBackward:
    def test_square_sum(self):
        x = leaf([1.0, 2.0])
        with Tape() as tape:
            loss = sum_(mul(x, x))
        backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [2, 4])

    def test_relu_sum(self):
        x = leaf([-1.0, 3.0])
        with Tape() as tape:
            loss = sum_(relu(x))
        backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [0, 1])

    def test_composite_conv_graph(self):
        w = np.random.default_rng(3).standard_normal((2, 2, 3, 3))
        x = np.random.default_rng(4).standard_normal((2, 5, 5))
        err = grad_check(lambda t: sum_(relu(F.conv2d(t, Tensor(w), pad=1))), x)
        assert err <= 1e-3

    def test_non_scalar_loss_rejected(self):
        x = leaf([1.0, 2.0])
        with Tape() as tape:
            y = mul(x, 2.0)
        with pytest.raises(ValueError):
            tape.backward(y)

    def test_loss_from_another_tape_rejected(self):
        x = leaf([1.0])
        with Tape():
            y = sum_(mul(x, 2.0))
        with Tape() as other:
            mul(x, 3.0)
        with pytest.raises(ValueError):
            other.backward(y)

    def test_unreachable_leaf_gets_zeros(self):
        x, z = leaf([1.0]), leaf([5.0])
        with Tape() as tape:
            loss = sum_(mul(x, 3.0))
            mul(z, 2.0)
        tape.backward(loss)
        np.testing.assert_array_equal(z.grad, [0])

    def test_gradients_overwrite(self):
        x = leaf([1.0])
        for _ in range(2):
            with Tape() as tape:
                loss = sum_(mul(x, 3.0))
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [3])

    def test_nothing_recorded_without_tape(self):
        x = leaf([1.0])
        assert mul(x, 2.0).node_id is None

    def test_shared_input_accumulates_within_one_pass(self):
        x = leaf([2.0])
        with Tape() as tape:
            loss = sum_(add(mul(x, x), x))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [5])

    def test_deterministic_gradients(self):
        def run():
            rng = np.random.default_rng(9)
            w = leaf(rng.standard_normal((4, 3, 3, 3)))
            x = Tensor(rng.standard_normal((3, 8, 8)))
            with Tape() as tape:
                loss = mean(relu(F.conv2d(x, w, pad=1)))
            tape.backward(loss)
            return loss.data.tobytes(), w.grad.tobytes()
        assert run() == run()


class TestGradCheck:
    def test_identity(self):
        assert grad_check(lambda t: t, np.array([0.3, -1.2, 2.0])) < 1e-9

    def test_cube(self):
        x = np.array([2.0])
        with Tape() as tape:
            t = Tensor(x, requires_grad=True)
            y = sum_(power(t, 3))
        tape.backward(y)
        assert abs(t.grad[0] - 12.0) < 1e-4
        assert grad_check(lambda t: sum_(power(t, 3)), x, h=1e-3) < 1e-4

    @pytest.mark.parametrize("h", [1e-5, 0.1])
    def test_step_range(self, h):
        with pytest.raises(ValueError):
            grad_check(lambda t: t, np.array([1.0]), h=h)


OPS = {
    "relu": lambda t: relu(t),
    "sigmoid": lambda t: sigmoid(t),
    "log_sigmoid": lambda t: log_sigmoid(t),
    "exp": lambda t: exp(t),
    "neg": lambda t: -t,
    "power": lambda t: power(t, 2),
    "add": lambda t: add(t, t * 0.5),
    "sub": lambda t: sub(t, Tensor(np.arange(12.0).reshape(3, 4))),
    "mul": lambda t: mul(t, t),
    "div": lambda t: div(t, add(mul(t, t), 1.0)),
    "matmul": lambda t: matmul(t, transpose(t)),
    "sum": lambda t: sum_(t, axis=0),
    "mean": lambda t: mean(t, axis=1, keepdims=True),
    "reshape": lambda t: reshape(t, (4, 3)),
    "transpose": lambda t: transpose(t),
    "getitem": lambda t: getitem(t, (slice(0, 2), [0, 0, 3])),
    "concat": lambda t: concat([t, mul(t, 2.0)], axis=1),
    "stack": lambda t: stack([t, t], axis=0),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_tensor_op_passes_grad_check(name):
    x = np.random.default_rng(5).uniform(-2, 2, (3, 4))
    x[np.abs(x) < 0.1] += 0.3          # keep relu away from its kink
    assert grad_check(OPS[name], x) <= 1e-3
