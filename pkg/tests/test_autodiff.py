import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qformer import autodiff as ad
from qformer.gradcheck import OP_TOL, check, op_cases, rel_error


def grad_of(fn, *values):
    nodes = [ad.param(np.asarray(v, dtype=np.float64)) for v in values]
    with ad.Tape() as tape:
        loss = fn(*nodes)
    tape.backward(loss)
    return [n.grad for n in nodes]


def test_matmul_identity():
    out = ad.matmul(ad.const(np.eye(2)), ad.const(np.array([[3.0, 4.0], [5.0, 6.0]])))
    np.testing.assert_array_equal(out.value, [[3, 4], [5, 6]])


def test_matmul_hand_value():
    out = ad.matmul(ad.const(np.array([[1.0, 2.0]])), ad.const(np.array([[3.0], [4.0]])))
    assert out.value.tolist() == [[11.0]]


def test_matmul_gradcheck_3x4_4x2(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    result = check("matmul", lambda d: ad.sum(ad.matmul(d["a"], d["b"])), {"a": a, "b": b})
    assert result.worst < 1e-6


def test_softmax_uniform_and_stable():
    np.testing.assert_allclose(ad.softmax(ad.const(np.zeros(3))).value, [1 / 3] * 3)
    big = ad.softmax(ad.const(np.array([1000.0, 1000.0]))).value
    assert np.isfinite(big).all()
    np.testing.assert_allclose(big, [0.5, 0.5])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-100, 100))
def test_softmax_shift_invariant(xs, shift):
    x = np.array(xs)
    a = ad.softmax(ad.const(x)).value
    b = ad.softmax(ad.const(x + shift)).value
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert abs(a.sum() - 1) < 1e-12


def test_elementwise_examples():
    assert ad.leaky_relu(ad.const(np.array(-1.0)), 0.01).value == pytest.approx(-0.01)
    pooled = ad.mean_pool2d(ad.const(np.array([1.0, 2, 3, 4]).reshape(1, 2, 2, 1)), 2)
    assert pooled.value.item() == pytest.approx(2.5)
    ln = ad.layer_norm(ad.const(np.full((2, 5), 3.0)))
    np.testing.assert_array_equal(ln.value, 0.0)


def test_sum_and_square_gradients(rng):
    x = rng.normal(size=(3, 4))
    (g,) = grad_of(lambda n: ad.sum(n), x)
    np.testing.assert_array_equal(g, np.ones_like(x))
    (g,) = grad_of(lambda n: ad.sum(ad.mul(n, n)), x)
    np.testing.assert_allclose(g, 2 * x)


def test_gradient_accumulates_over_reuse():
    (g,) = grad_of(lambda n: ad.sum(ad.add(ad.mul(n, n), n)), np.array([1.0, -2.0]))
    np.testing.assert_allclose(g, [3.0, -3.0])


def test_safe_reciprocal_clamps_and_passes_gradient():
    (g,) = grad_of(lambda z: ad.sum(ad.safe_reciprocal(z)), np.array([0.0, 2.0]))
    out = ad.safe_reciprocal(ad.const(np.array([0.0, -1e-6, 2.0])))
    np.testing.assert_allclose(out.value, [1e4, -1e4, 0.5])
    np.testing.assert_allclose(g, [-1e8, -0.25])


def test_backward_twice_raises():
    x = ad.param(np.ones(3))
    with ad.Tape() as tape:
        loss = ad.sum(x)
    tape.backward(loss)
    with pytest.raises(ad.BackwardError):
        tape.backward(loss)
    tape.reset()


def test_backward_needs_scalar():
    x = ad.param(np.ones(3))
    with ad.Tape() as tape:
        y = ad.scale(x, 2.0)
    with pytest.raises(ad.BackwardError):
        tape.backward(y)


def test_node_broadcast_restricted_to_leading_axes():
    a = ad.param(np.ones((2, 3)))
    b = ad.param(np.ones((3, 1)))
    with ad.Tape():
        with pytest.raises(ad.ShapeError):
            ad.add(a, b)
        # leading batch broadcasting is allowed
        ad.add(ad.param(np.ones((4, 2, 3))), a)


def test_constant_operands_broadcast_freely(rng):
    x = rng.normal(size=(2, 3))
    (g,) = grad_of(lambda n: ad.sum(ad.mul(n, np.array([[1.0], [2.0]]))), x)
    np.testing.assert_allclose(g, [[1, 1, 1], [2, 2, 2]])


def test_no_tape_records_nothing():
    x = ad.param(np.ones(2))
    y = ad.sum(ad.mul(x, x))
    assert y.tape is None
    with pytest.raises(ad.BackwardError):
        ad.backward(y)


def test_forward_deterministic(rng):
    x = rng.normal(size=(4, 6))
    w = rng.normal(size=(6, 3))
    outs = [ad.gelu(ad.linear(ad.const(x), ad.const(w))).value for _ in range(2)]
    assert np.array_equal(outs[0], outs[1])


CASES = op_cases(seed=3)


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradcheck(name):
    fn, inputs = CASES[name]
    result = check(name, fn, inputs)
    assert result.passed, (name, result.errors)
    assert result.tol == OP_TOL


def test_rel_error_floor():
    assert rel_error(np.zeros(3), np.zeros(3)) == 0.0
    assert rel_error(np.array([1.0]), np.array([1.0 + 1e-9])) < 1e-8
