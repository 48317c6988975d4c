import threading

import numpy as np
import pytest

from elplab import autodiff as ad
from elplab.errors import DomainError, ElpError, NonFiniteError, ShapeError

FORWARD_CASES = [
    ("add", ([1.0, 2.0], [3.0, 4.0]), {}, [4.0, 6.0]),
    ("sub", ([1.0, 2.0], [3.0, 5.0]), {}, [-2.0, -3.0]),
    ("mul", ([1.0, 2.0], [3.0, 4.0]), {}, [3.0, 8.0]),
    ("softmax", ([0.0, 0.0, 0.0],), {}, [1 / 3, 1 / 3, 1 / 3]),
    ("relu", ([-1.0, 0.5],), {}, [0.0, 0.5]),
    ("sum", ([[1.0, 2.0], [3.0, 4.0]],), {"axis": 0}, [4.0, 6.0]),
    ("mean", ([[1.0, 2.0], [3.0, 4.0]],), {"axis": 1}, [1.5, 3.5]),
    ("variance", ([[0.0, 2.0], [1.0, 1.0]],), {"axis": 1}, [1.0, 0.0]),
    ("sqrt", ([4.0, 9.0],), {}, [2.0, 3.0]),
    ("concat", ([1.0], [2.0, 3.0]), {"axis": 0}, [1.0, 2.0, 3.0]),
    ("clip", ([-2.0, 0.5, 2.0],), {"low": -1.0, "high": 1.0}, [-1.0, 0.5, 1.0]),
]


@pytest.mark.parametrize("op_kind,inputs,attrs,expected", FORWARD_CASES)
def test_forward_values(op_kind, inputs, attrs, expected):
    out = ad.forward_op(op_kind, *inputs, **attrs)
    np.testing.assert_allclose(out.values, expected, rtol=0, atol=1e-15)


def test_matmul_matches_triple_loop():
    gen = np.random.default_rng(0)
    a = gen.normal(size=(2, 3))
    b = gen.normal(size=(3, 4))
    expected = np.zeros((2, 4))
    for i in range(2):
        for j in range(4):
            for k in range(3):
                expected[i, j] += a[i, k] * b[k, j]
    out = ad.Tensor(a) @ ad.Tensor(b)
    np.testing.assert_allclose(out.values, expected, rtol=0, atol=1e-12)


ERROR_CASES = [
    ("add", ([1.0, 2.0], [1.0, 2.0, 3.0]), {}, ShapeError),
    ("matmul", (np.ones((2, 3)), np.ones((2, 3))), {}, ShapeError),
    ("log", ([1.0, -1.0],), {}, DomainError),
    ("log", ([0.0],), {}, DomainError),
    ("sqrt", ([-1e-3],), {}, DomainError),
    ("reshape", (np.ones(6),), {"shape": (4, 2)}, ShapeError),
    ("nope", ([1.0],), {}, DomainError),
]


@pytest.mark.parametrize("op_kind,inputs,attrs,error", ERROR_CASES)
def test_forward_errors(op_kind, inputs, attrs, error):
    with pytest.raises(error):
        ad.forward_op(op_kind, *inputs, **attrs)


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"add: shapes \(2,\) and \(3,\)"):
        ad.Tensor([1.0, 2.0]) + ad.Tensor([1.0, 2.0, 3.0])


def test_tensor_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        ad.Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        ad.exp(ad.Tensor([1000.0]))


def test_tensor_values_are_immutable():
    t = ad.Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.values[0] = 5.0


def test_backward_power_rule():
    x = ad.Tensor(3.0, requires_grad=True)
    with ad.Tape() as tape:
        root = x * x
    ad.backward(tape, root)
    assert float(x.grad) == pytest.approx(6.0)


def test_backward_skips_constant_leaves():
    c = ad.Tensor([1.0, 2.0])
    x = ad.Tensor([1.0, 1.0], requires_grad=True)
    with ad.Tape() as tape:
        root = ad.tsum(c * 2.0) + ad.tsum(x)
    ad.backward(tape, root)
    assert c.grad is None
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])


def test_backward_accumulates_until_cleared():
    x = ad.Tensor([2.0], requires_grad=True)
    for _ in range(2):
        with ad.Tape() as tape:
            root = ad.tsum(x * x)
        ad.backward(tape, root)
    np.testing.assert_allclose(x.grad, [8.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_root_must_be_scalar():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    with ad.Tape() as tape:
        root = x * 2.0
    with pytest.raises(ShapeError):
        ad.backward(tape, root)


def test_backward_root_must_be_on_tape():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    with ad.Tape() as first:
        root = ad.tsum(x)
    with ad.Tape() as second:
        ad.tsum(x * 2.0)
    with pytest.raises(ElpError):
        ad.backward(second, root)
    with pytest.raises(ElpError):
        ad.backward(first, ad.Tensor(1.0))


def test_no_recording_without_tape():
    x = ad.Tensor([1.0], requires_grad=True)
    y = x * 2.0
    assert not y.requires_grad


def test_tapes_are_thread_local():
    seen = []

    def worker():
        seen.append(ad.active_tape())

    with ad.Tape():
        thread = threading.Thread(target=worker)
        thread.start()
        thread.join()
    assert seen == [None]


def _weights(shape, seed=99):
    return np.random.default_rng(seed).normal(size=shape)


# each entry: op name, scalar function of its inputs, input generator
GRADIENT_CASES = [
    ("add", lambda a, b: ad.tsum((a + b) * _weights(4)), lambda g: [g.normal(size=4), g.normal(size=4)]),
    ("sub", lambda a, b: ad.tsum((a - b) * _weights(4)), lambda g: [g.normal(size=4), g.normal(size=4)]),
    ("mul", lambda a, b: ad.tsum(a * b), lambda g: [g.normal(size=(2, 3)), g.normal(size=(2, 3))]),
    ("broadcast", lambda a, b: ad.tsum((a + b) * _weights((3, 2))), lambda g: [g.normal(size=(3, 2)), g.normal(size=2)]),
    ("matmul", lambda a, b: ad.tsum((a @ b) * _weights((2, 4))), lambda g: [g.normal(size=(2, 3)), g.normal(size=(3, 4))]),
    ("concat", lambda a, b: ad.tsum(ad.concat([a, b], axis=1) * _weights((2, 5))), lambda g: [g.normal(size=(2, 2)), g.normal(size=(2, 3))]),
    ("slice", lambda a: ad.tsum(a[:, 1:3] * _weights((3, 2))), lambda g: [g.normal(size=(3, 4))]),
    ("reshape", lambda a: ad.tsum(a.reshape(3, 2) * _weights((3, 2))), lambda g: [g.normal(size=6)]),
    ("relu", lambda a: ad.tsum(ad.relu(a) * _weights(6)), lambda g: [g.uniform(0.1, 1.0, size=6) * np.sign(g.normal(size=6))]),
    ("tanh", lambda a: ad.tsum(ad.tanh(a) * _weights(5)), lambda g: [g.normal(size=5)]),
    ("sigmoid", lambda a: ad.tsum(ad.sigmoid(a) * _weights(5)), lambda g: [g.normal(size=5)]),
    ("softmax", lambda a: ad.tsum(ad.softmax(a, axis=-1) * _weights((2, 4))), lambda g: [g.normal(size=(2, 4))]),
    ("log", lambda a: ad.tsum(ad.log(a) * _weights(5)), lambda g: [g.uniform(0.5, 2.0, size=5)]),
    ("exp", lambda a: ad.tsum(ad.exp(a) * _weights(5)), lambda g: [g.normal(size=5)]),
    ("mean", lambda a: ad.tsum(ad.mean(a, axis=0) * _weights(3)), lambda g: [g.normal(size=(4, 3))]),
    ("sum", lambda a: ad.tsum(ad.tsum(a, axis=1) * _weights(4)), lambda g: [g.normal(size=(4, 3))]),
    ("variance", lambda a: ad.tsum(ad.variance(a, axis=0) * _weights(3)), lambda g: [g.normal(size=(5, 3))]),
    ("sqrt", lambda a: ad.tsum(ad.sqrt(a) * _weights(5)), lambda g: [g.uniform(0.5, 2.0, size=5)]),
    ("abs", lambda a: ad.tsum(ad.tabs(a) * _weights(5)), lambda g: [g.uniform(0.1, 1.0, size=5) * np.sign(g.normal(size=5))]),
    ("clip", lambda a: ad.tsum(ad.clip(a, -10.0, 10.0) * _weights(5)), lambda g: [g.normal(size=5)]),
]


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("name,func,point", GRADIENT_CASES)
def test_gradients_match_finite_differences(name, func, point, seed):
    error = ad.finite_difference_check(func, point(np.random.default_rng(seed)), h=1e-5)
    assert error < 1e-4, name


def test_random_graph_gradient():
    gen = np.random.default_rng(4)

    def func(x, w):
        hidden = ad.tanh(x @ w)
        return ad.tsum(ad.sigmoid(hidden) * hidden)

    error = ad.finite_difference_check(func, [gen.normal(size=(3, 4)), gen.normal(size=(4, 2))])
    assert error < 1e-4


def test_linear_function_is_exact():
    w = np.array([0.5, -1.0, 2.0, 0.25, 1.5])
    error = ad.finite_difference_check(lambda x: ad.tsum(x * w), [np.ones(5)], h=2.0**-17)
    assert error < 1e-10


def test_saturated_sigmoid_reports_finite_error():
    error = ad.finite_difference_check(lambda x: ad.tsum(ad.sigmoid(x)), [np.array([30.0, -30.0])])
    assert np.isfinite(error)


def test_non_finite_perturbation_raises():
    point = [np.array([1.797693])]
    with pytest.raises(NonFiniteError):
        ad.finite_difference_check(lambda x: ad.tsum(x * 1e308), point, h=1e-5)


def test_independent_graphs_concatenate():
    gen = np.random.default_rng(1)
    a0, b0 = gen.normal(size=3), gen.normal(size=4)

    def grads(build):
        a = ad.Tensor(a0, requires_grad=True)
        b = ad.Tensor(b0, requires_grad=True)
        with ad.Tape() as tape:
            root = build(a, b)
        ad.backward(tape, root)
        return a.grad, b.grad

    joint = grads(lambda a, b: ad.tsum(ad.tanh(a)) + ad.tsum(ad.exp(b)))
    only_a = grads(lambda a, b: ad.tsum(ad.tanh(a)))
    only_b = grads(lambda a, b: ad.tsum(ad.exp(b)))
    np.testing.assert_array_equal(joint[0], only_a[0])
    np.testing.assert_array_equal(joint[1], only_b[1])


def test_replay_is_bit_identical():
    def run():
        gen = np.random.default_rng(7)
        x = ad.Tensor(gen.normal(size=(3, 3)), requires_grad=True)
        with ad.Tape() as tape:
            root = ad.tsum(ad.softmax(x @ x, axis=-1) * gen.normal(size=(3, 3)))
        ad.backward(tape, root)
        return root.item(), x.grad

    first, second = run(), run()
    assert first[0] == second[0]
    np.testing.assert_array_equal(first[1], second[1])


def test_straight_through_forward_and_backward():
    soft = ad.Tensor([0.2, 0.8], requires_grad=True)
    with ad.Tape() as tape:
        hard = ad.straight_through(soft, [0.0, 1.0])
        root = ad.tsum(hard * np.array([3.0, 5.0]))
    ad.backward(tape, root)
    np.testing.assert_array_equal(hard.values, [0.0, 1.0])
    np.testing.assert_array_equal(soft.grad, [3.0, 5.0])


def test_sqrt_subgradient_at_zero():
    x = ad.Tensor([0.0, 4.0], requires_grad=True)
    with ad.Tape() as tape:
        root = ad.tsum(ad.sqrt(x))
    ad.backward(tape, root)
    np.testing.assert_allclose(x.grad, [0.0, 0.25])


def test_repeated_index_gradients_accumulate():
    x = ad.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with ad.Tape() as tape:
        root = ad.tsum(x[np.array([0, 0, 2, 0])] * np.array([1.0, 2.0, 5.0, 4.0]))
    ad.backward(tape, root)
    np.testing.assert_array_equal(x.grad, [7.0, 0.0, 5.0])


def test_ellipsis_slice_gradient():
    x = ad.Tensor(np.ones((2, 4)), requires_grad=True)
    with ad.Tape() as tape:
        root = ad.tsum(x[..., 1:])
    ad.backward(tape, root)
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 1.0, 1.0]] * 2)
