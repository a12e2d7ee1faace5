"""Tests for the reverse-mode autodiff core."""

import math

import numpy as np
import pytest

from diffctl import adcore as ad
from diffctl.errors import DomainError, NonFiniteError


def test_product_and_sine_gradient():
    value, grad = ad.value_and_grad(lambda x: x[0] * x[1] + ad.sin(x[0]), [2.0, 3.0])
    assert value == pytest.approx(6.0 + math.sin(2.0))
    assert grad == pytest.approx([3.0 + math.cos(2.0), 2.0])


def test_exp_of_sine():
    value, grad = ad.value_and_grad(lambda x: ad.exp(ad.sin(x[0])), [0.5])
    assert value == pytest.approx(1.6151, abs=1e-4)
    assert grad == pytest.approx([math.cos(0.5) * math.exp(math.sin(0.5))])


def test_gradients_are_linear_and_repeatable():
    def f(x):
        return x[0] * ad.exp(x[1]) - ad.tanh(x[2])

    def g(x):
        return ad.log(1.0 + x[0] * x[0]) + x[1] * x[2]

    x = [0.4, -0.9, 1.7]
    _, grad_f = ad.value_and_grad(f, x)
    _, grad_g = ad.value_and_grad(g, x)
    _, grad_sum = ad.value_and_grad(lambda v: 2.0 * f(v) + 3.0 * g(v), x)
    assert grad_sum == pytest.approx(2.0 * grad_f + 3.0 * grad_g, rel=1e-12)
    assert np.array_equal(ad.value_and_grad(f, x)[1], grad_f)


def test_jacobians_of_small_maps():
    assert ad.jacobian(lambda x: x, [0.3, -1.2, 2.0]) == pytest.approx(np.eye(3))
    assert ad.jacobian(lambda x: np.array([x[0] + x[1], x[0] - x[1]], dtype=object), [0.5, 4.0]) == pytest.approx(
        np.array([[1.0, 1.0], [1.0, -1.0]]))
    assert ad.jacobian(lambda x: np.array([x[0] * x[1], x[0] * x[0]], dtype=object), [2.0, 3.0]) == pytest.approx(
        np.array([[3.0, 2.0], [4.0, 0.0]]))


def test_chain_through_every_primitive():
    def f(x):
        a, b = x[0], x[1]
        return ad.exp(a / b) + ad.log(a * a + 1.0) - ad.tanh(b) * ad.sqrt(a + 2.0) + a ** 3 - 2.0 ** b + a ** b

    x = [0.7, 1.3]
    _, grad = ad.value_and_grad(f, x)
    assert grad == pytest.approx(ad.fd_gradient(f, x, h=1e-6), rel=1e-6, abs=1e-8)


_RANDOM_FUNCTIONS = [
    lambda x: ad.exp(0.3 * x[0]) * ad.sin(x[1]) + x[2] * x[2],
    lambda x: ad.log(1.0 + x[0] * x[0]) / (2.0 + ad.cos(x[1])) - x[2],
    lambda x: ad.tanh(x[0] * x[1] - x[2]) + ad.sqrt(x[0] * x[0] + x[1] * x[1] + 1.0),
    lambda x: (x[0] - x[1]) ** 2 * ad.cos(x[2]) + 3.0 / (1.0 + x[1] * x[1]),
    lambda x: ad.maximum(x[0], 0.5 * x[1]) * x[2] + ad.minimum(x[1], x[2]) ** 3,
]


def test_randomized_gradients_match_central_differences():
    rng = np.random.default_rng(0)
    for trial in range(100):
        f = _RANDOM_FUNCTIONS[trial % len(_RANDOM_FUNCTIONS)]
        x = rng.uniform(-1.5, 1.5, size=3)
        # keep max/min away from their kinks
        x[1] = x[1] if abs(x[0] - 0.5 * x[1]) > 1e-2 else x[1] + 0.1
        _, grad = ad.value_and_grad(f, x)
        fd = ad.fd_gradient(f, x, h=1e-6)
        scale = np.maximum(1.0, np.abs(fd))
        assert np.all(np.abs(grad - fd) / scale <= 1e-5), (trial, grad, fd)


def test_vars_inside_object_arrays():
    tape = ad.Tape()
    xs = tape.variables([0.5, -1.0, 2.0])
    w = np.array([[1.0, 2.0, 0.0], [0.0, -1.0, 3.0]])
    z = ad.tanh(w @ xs)
    out = z[0] + 2.0 * z[1]
    grad = ad.gradient(tape, out)

    pre = w @ np.array([0.5, -1.0, 2.0])
    expected = (1.0 - np.tanh(pre[0]) ** 2) * w[0] + 2.0 * (1.0 - np.tanh(pre[1]) ** 2) * w[1]
    assert grad == pytest.approx(expected)


def test_float_arrays_pass_through_elementwise_functions():
    x = np.array([0.0, 1.0])
    assert ad.exp(x) == pytest.approx(np.exp(x))
    assert ad.value_of(ad.tanh(x)) == pytest.approx(np.tanh(x))


def test_domain_errors_name_the_primitive():
    tape = ad.Tape()
    x = tape.variable(-1.0)
    with pytest.raises(DomainError) as info:
        ad.log(x)
    assert info.value.primitive == "log"
    with pytest.raises(DomainError):
        ad.sqrt(x)
    with pytest.raises(DomainError):
        x ** 0.5
    with pytest.raises(DomainError):
        1.0 / (x + 1.0)
    with pytest.raises(DomainError):
        ad.log(np.array([1.0, 0.0]))


def test_power_at_zero_needs_a_finite_derivative():
    tape = ad.Tape()
    x = tape.variable(0.0)
    with pytest.raises(DomainError) as info:
        ad.power(x, 0.5)
    assert info.value.primitive == "power"
    with pytest.raises(DomainError):
        x ** -1.0
    square = x ** 2.0
    assert ad.value_of(square) == 0.0
    assert ad.gradient(tape, square, [x]) == pytest.approx([0.0])


def test_infinite_partial_raises_non_finite():
    tape = ad.Tape()
    x = tape.variable(0.0)
    y = ad.sqrt(x)
    with pytest.raises(NonFiniteError):
        ad.gradient(tape, y)


def test_mixing_tapes_is_rejected():
    a = ad.Tape().variable(1.0)
    b = ad.Tape().variable(2.0)
    with pytest.raises(ValueError):
        a + b


def test_constant_output_has_zero_gradient():
    tape = ad.Tape()
    xs = tape.variables([1.0, 2.0])
    assert ad.gradient(tape, 3.0, list(xs)) == pytest.approx([0.0, 0.0])


def test_minimum_ties_follow_left_operand():
    tape = ad.Tape()
    a, b = tape.variable(1.0), tape.variable(1.0)
    out = ad.minimum(a, b)
    assert ad.gradient(tape, out, [a, b]) == pytest.approx([1.0, 0.0])


def test_clip_gradient_is_zero_at_the_bound():
    tape = ad.Tape()
    xs = tape.variables([-2.0, 0.3, 5.0])
    clipped = ad.clip(xs, -1.0, 1.0)
    total = clipped[0] + clipped[1] + clipped[2]
    assert ad.value_of(clipped) == pytest.approx([-1.0, 0.3, 1.0])
    assert ad.gradient(tape, total, list(xs)) == pytest.approx([0.0, 1.0, 0.0])


def test_second_derivative_through_recorded_backward_pass():
    tape = ad.Tape()
    x = tape.variable(1.5)
    y = x * x * x
    (dy,) = ad.gradient_graph(tape, y, [x])
    assert ad.value_of(dy) == pytest.approx(3.0 * 1.5 ** 2)
    assert ad.gradient(tape, dy, [x]) == pytest.approx([6.0 * 1.5])


def test_gradient_with_respect_to_an_intermediate_node():
    tape = ad.Tape()
    x = tape.variable(2.0)
    mid = ad.add(x * x, 0.0)
    out = 3.0 * mid + x
    assert ad.gradient(tape, out, [mid]) == pytest.approx([3.0])
    assert ad.value_of(ad.gradient_graph(tape, out, [mid])[0]) == pytest.approx(3.0)


def test_hessian_matches_analytic():
    def f(x):
        return x[0] * x[0] * x[1] + ad.exp(x[1])

    x = [0.8, -0.4]
    expected = np.array([[2.0 * x[1], 2.0 * x[0]], [2.0 * x[0], math.exp(x[1])]])
    assert ad.hessian(f, x) == pytest.approx(expected)


def test_jacobian_rows_are_output_gradients():
    def f(x):
        return np.array([x[0] * x[1], ad.sin(x[0]) + x[1]], dtype=object)

    jac = ad.jacobian(f, [0.3, 2.0])
    assert jac == pytest.approx(np.array([[2.0, 0.3], [math.cos(0.3), 1.0]]))


def test_fd_gradient_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        ad.fd_gradient(lambda x: x[0], [1.0], h=0.0)


def test_tape_counts_nodes_by_kind():
    tape = ad.Tape()
    xs = tape.variables([1.0, 2.0])
    _ = xs[0] * xs[1] + 1.0
    assert tape.count("input") == 2
    assert tape.count("mul") == 1
    assert tape.count("add") == 1
    assert tape.inputs == [0, 1]
