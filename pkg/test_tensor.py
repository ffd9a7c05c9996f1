#!/usr/bin/env python3
"""
Tests for the tensor engine: primitives, reverse mode and second order
"""

import numpy as np

from src.losses import r1_penalty
from src.tensor import (NonFiniteError, ShapeError, Tape, Tensor, backward, forward_op, grad_check, leaky_relu,
                        matmul, mul, precision, square, sum_, tanh)


def _rng(seed=0):
    return np.random.default_rng(seed)


def test_forward_examples():
    """add, matmul and leaky_relu on hand-checked values"""
    assert np.array_equal(forward_op('add', Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])
    out = forward_op('matmul', Tensor(np.ones((2, 3))), Tensor(np.ones((3, 1))))
    assert out.shape == (2, 1) and np.all(out.data == 3)
    out = forward_op('leaky_relu', Tensor([-1.0, 2.0]), slope=0.2)
    assert np.allclose(out.data, [-0.2, 2.0])


def test_shape_errors_name_op_and_shapes():
    try:
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        assert False, "expected ShapeError"
    except ShapeError as e:
        assert 'matmul' in str(e) and '(2, 3)' in str(e)
    try:
        forward_op('add', Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
        assert False, "expected ShapeError"
    except ShapeError as e:
        assert 'add' in str(e)


def test_first_derivative():
    x = Tensor([3.0])
    with Tape() as tape:
        tape.watch(x)
        y = square(x)
        (grad,) = tape.gradient(y, [x])
    assert np.isclose(grad.item(), 6.0)


def test_second_derivative_by_double_backward():
    """d2/dx2 x^3 at 2 is 12"""
    x = Tensor([2.0])
    with Tape() as tape:
        tape.watch(x)
        y = mul(square(x), x)
        (first,) = tape.gradient(y, [x], create_graph=True)
        (second,) = tape.gradient(first, [x], create_graph=False)
    assert np.isclose(first.item(), 12.0)
    assert np.isclose(second.item(), 12.0)


def test_leaky_relu_gradient():
    x = Tensor([-1.0, 1.0])
    with Tape() as tape:
        tape.watch(x)
        grads = backward(tape, sum_(leaky_relu(x, 0.2)))
    assert np.allclose(grads[x.id].data, [0.2, 1.0])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0])
    with Tape() as tape:
        tape.watch(x)
        y = square(x)
        try:
            tape.backward(y)
            assert False, "expected ShapeError"
        except ShapeError:
            pass


def test_detached_tensor_gets_zero_gradient():
    x = Tensor([1.0, 2.0])
    other = Tensor([5.0, 5.0])
    with Tape() as tape:
        tape.watch(x)
        y = sum_(square(x))
        gx, gother = tape.gradient(y, [x, other])
    assert np.allclose(gx.data, [2.0, 4.0])
    assert np.all(gother.data == 0) and gother.shape == other.shape


def test_parameters_are_not_mutated_by_watching():
    w = Tensor([1.0, 2.0])
    with Tape() as tape:
        tape.watch(w)
        sum_(square(w))
    assert w.node is None


def test_non_finite_output_raises():
    try:
        forward_op('div', Tensor([1.0]), Tensor([0.0]))
        assert False, "expected NonFiniteError"
    except NonFiniteError:
        pass


def test_primitive_gradients_match_finite_differences():
    """every primitive, random inputs in [-2, 2], relative error below 1e-3"""
    rng = _rng(1)

    def away_from_zero(shape):
        values = rng.uniform(0.2, 2.0, size=shape)
        return values * rng.choice([-1.0, 1.0], size=shape)

    a = Tensor(away_from_zero((3, 4)))
    b = Tensor(away_from_zero((3, 4)))
    m = Tensor(away_from_zero((4, 2)))
    positive = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)))
    cases = {
        'add': lambda x: sum_(forward_op('add', x, b)),
        'sub': lambda x: sum_(forward_op('sub', b, x)),
        'mul': lambda x: sum_(forward_op('mul', x, square(x))),
        'div': lambda x: sum_(forward_op('div', b, x)),
        'neg': lambda x: sum_(mul(forward_op('neg', x), b)),
        'matmul': lambda x: sum_(square(forward_op('matmul', x, m))),
        'transpose': lambda x: sum_(square(forward_op('matmul', forward_op('transpose', x), b))),
        'leaky_relu': lambda x: sum_(mul(forward_op('leaky_relu', x, slope=0.2), b)),
        'tanh': lambda x: sum_(forward_op('tanh', x)),
        'exp': lambda x: sum_(forward_op('exp', mul(x, 0.5))),
        'square': lambda x: sum_(forward_op('square', x)),
        'sum': lambda x: sum_(square(forward_op('sum', x, axis=1))),
        'mean': lambda x: sum_(square(forward_op('mean', x, axis=0))),
        'broadcast': lambda x: sum_(mul(forward_op('broadcast', forward_op('sum', x, axis=0), (3, 4)), b)),
        'concat': lambda x: sum_(square(forward_op('concat', x, b, axis=1))),
        'slice': lambda x: sum_(square(forward_op('slice', x, 1, 3, axis=1))),
    }
    for name, f in cases.items():
        error = grad_check(f, a)
        assert error < 1e-3, f"{name}: relative error {error}"
    assert grad_check(lambda x: sum_(forward_op('sqrt', x)), positive) < 1e-3
    assert grad_check(lambda x: sum_(forward_op('clamp_min', x, floor=0.1)), Tensor(away_from_zero((3, 4)))) < 1e-3


def test_grad_check_examples():
    x = Tensor(_rng(2).uniform(-2, 2, size=8))
    assert grad_check(lambda v: sum_(square(v)), x, step=1e-3) < 1e-3
    assert grad_check(lambda v: Tensor([4.0]), x) == 0.0


def test_r1_term_second_order():
    """parameter gradient of the R1 penalty through a 2-layer critic"""
    rng = _rng(3)
    x = Tensor(rng.standard_normal((5, 3)))
    w = Tensor(rng.standard_normal((3, 4)) * 0.5)
    v = Tensor(rng.standard_normal((4, 1)))

    def penalty(weights):
        critic = lambda inputs: matmul(tanh(matmul(inputs, weights)), v)  # noqa: E731
        return r1_penalty(critic, x)

    assert grad_check(penalty, w) < 1e-2

    def penalty_in_x(inputs):
        critic = lambda values: matmul(tanh(matmul(values, w)), v)  # noqa: E731
        return r1_penalty(critic, inputs)

    assert grad_check(penalty_in_x, x) < 1e-2


def test_replay_is_deterministic():
    rng = _rng(4)
    x = rng.standard_normal((6, 5))
    w = Tensor(rng.standard_normal((5, 5)))

    def run():
        inputs = Tensor(x)
        with Tape() as tape:
            tape.watch(inputs, w)
            out = sum_(square(tanh(matmul(inputs, w))))
            grads = tape.gradient(out, [inputs, w], create_graph=False)
        return out.data.tobytes(), [g.data.tobytes() for g in grads]

    assert run() == run()


def test_precision_context():
    with precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


if __name__ == "__main__":
    print("🧪 Testing tensor engine")
    for name, test in list(globals().items()):
        if name.startswith('test_') and callable(test):
            test()
            print(f"✅ {name}")
    print("🎉 Tensor engine tests completed!")
