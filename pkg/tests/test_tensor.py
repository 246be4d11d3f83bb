import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ifprune import tensor as T
from ifprune.tensor import NonFiniteError, ShapeError, Tensor, backward, grad_check


def test_identity_matmul():
    eye = Tensor(np.eye(2))
    x = Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal((eye @ x).data, [[3, 4], [5, 6]])


def test_analytic_values():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    assert T.silu(Tensor(0.0)).item() == 0.0
    np.testing.assert_allclose(T.softmax(Tensor(np.full((1, 4), 3.0))).data, [[0.25] * 4])


def test_shape_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError, match="add"):
        Tensor(np.ones(3)) + Tensor(np.ones(4))


def test_non_finite_rejected():
    x = Tensor([1e300], requires_grad=True)
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        x * 1e300


def test_backward_square():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2, 4, 6])


def test_backward_constant_loss_leaves_zero_grads():
    x = Tensor([1.0, 2.0], requires_grad=True)
    x.zero_grad()
    backward(Tensor(3.0) * 2.0)
    np.testing.assert_array_equal(x.grad, [0, 0])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_backward_accumulates_and_resets():
    x = Tensor([1.0, -1.0], requires_grad=True)
    backward((x * 3.0).sum())
    backward((x * 3.0).sum())
    np.testing.assert_array_equal(x.grad, [6, 6])
    T.zero_grad([x])
    np.testing.assert_array_equal(x.grad, [0, 0])


def test_cross_entropy_uniform_gradient():
    V, batch = 5, 3
    logits = Tensor(np.zeros((batch, V)), requires_grad=True)
    targets = np.array([0, 3, 1])
    loss = T.cross_entropy(logits, targets)
    assert loss.item() == pytest.approx(np.log(V))
    backward(loss)
    expected = (1.0 / V - np.eye(V)[targets]) / batch
    np.testing.assert_allclose(logits.grad, expected, atol=1e-15)


def test_cross_entropy_masked_positions_get_no_gradient():
    logits = Tensor(np.random.default_rng(0).normal(size=(4, 6)), requires_grad=True)
    mask = np.array([True, False, True, False])
    backward(T.cross_entropy(logits, np.array([1, 2, 3, 4]), mask))
    assert np.all(logits.grad[~mask] == 0)
    assert np.all(logits.grad[mask] != 0)


def test_cross_entropy_rejects_empty_mask():
    with pytest.raises(ValueError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 1]), np.array([False, False]))


def test_index_repeated_rows_accumulate():
    w = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    backward(T.embedding(w, [2, 2, 0]).sum())
    np.testing.assert_array_equal(w.grad, [[1, 1], [0, 0], [2, 2]])


@pytest.mark.parametrize("name,report", list(T.check_primitives().items()))
def test_primitive_gradients(name, report):
    assert report.passed, f"{name}: {report.errors}"


def test_grad_check_sum_of_squares():
    x = Tensor(np.random.default_rng(1).uniform(-2, 2, 5), requires_grad=True, name="x")
    rep = grad_check(lambda: (x * x).sum(), [x], eps=1e-5, tol=1e-7)
    assert rep.passed and rep.max_error <= 1e-7


def test_grad_check_detects_corrupted_rule():
    x = Tensor(np.random.default_rng(2).uniform(-2, 2, 4), requires_grad=True, name="x")

    def bad_square(a):
        return T._make(a.data ** 2, (a,), lambda g: (g * 3.0 * a.data,), "bad_square")

    rep = grad_check(lambda: bad_square(x).sum(), [x], tol=1e-6)
    assert not rep.passed


def test_grad_check_masked_ffn_toy():
    rng = np.random.default_rng(3)
    from ifprune.model import ffn_forward_masked
    x = Tensor(rng.uniform(-2, 2, (3, 4)), True, "x")
    w1 = Tensor(rng.uniform(-1, 1, (4, 4)), True, "w1")
    w3 = Tensor(rng.uniform(-1, 1, (4, 4)), True, "w3")
    w2 = Tensor(rng.uniform(-1, 1, (4, 4)), True, "w2")
    m = Tensor([1.0, 0.3, 0.0, 0.7], True, "m")
    rep = grad_check(lambda: (ffn_forward_masked(x, w1, w3, w2, m) * 0.5).sum(), [x, w1, w3, w2, m], tol=1e-5)
    assert rep.passed, rep.errors


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3).filter(lambda a: abs(a) > 1e-3), st.integers(0, 2**16))
def test_backward_is_linear_in_loss_scale(a, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
    w = Tensor(rng.uniform(-2, 2, (4, 2)), requires_grad=True)

    def loss():
        return T.softmax(T.silu(x @ w)).sum(axis=0).mean() + (x * x).mean()

    backward(loss())
    g1 = x.grad.copy(), w.grad.copy()
    T.zero_grad([x, w])
    backward(loss() * a)
    np.testing.assert_allclose(x.grad, a * g1[0], rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(w.grad, a * g1[1], rtol=1e-12, atol=1e-15)


def test_ops_are_deterministic():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(8, 16)), rng.normal(size=(16, 4))
    r1 = T.softmax(Tensor(a) @ Tensor(b)).data
    r2 = T.softmax(Tensor(a) @ Tensor(b)).data
    assert np.array_equal(r1, r2)
