import math

import numpy as np
import pytest

from common import autodiff as ad
from common.autodiff import IGNORE_INDEX, Tape, Tensor, corrupted_derivative, finite_diff_check
from common.errors import (EmptyLossError, LabelError, NumericError, OracleError,
                           PreconditionError, ShapeError, StateError)


def test_softmax_closed_forms():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=1e-12)
    np.testing.assert_allclose(
        ad.softmax(Tensor([math.log(2.0), 0.0])).data, [2.0 / 3.0, 1.0 / 3.0], atol=1e-12
    )


def test_softmax_shift_invariant_and_normalised():
    x = np.random.default_rng(0).normal(size=(4, 7))
    y = ad.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(ad.softmax(Tensor(x + 123.0), axis=-1).data, y, atol=1e-12)
    np.testing.assert_allclose(y.sum(axis=-1), np.ones(4), atol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        ad.softmax(Tensor([0.0, np.nan]))


def test_layer_norm_examples():
    one, zero = Tensor([1.0, 1.0]), Tensor([0.0, 0.0])
    np.testing.assert_allclose(ad.layer_norm(Tensor([1.0, 3.0]), one, zero).data, [-1.0, 1.0], atol=1e-6)
    np.testing.assert_allclose(ad.layer_norm(Tensor([5.0, 5.0]), one, zero).data, [0.0, 0.0])
    np.testing.assert_allclose(
        ad.layer_norm(Tensor([3.0, -8.0]), Tensor([0.0, 0.0]), Tensor([7.0, 7.0])).data, [7.0, 7.0]
    )


def test_layer_norm_errors():
    with pytest.raises(ShapeError):
        ad.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))
    with pytest.raises(PreconditionError):
        ad.layer_norm(Tensor(np.ones(3)), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0)


def test_cross_entropy():
    loss = ad.cross_entropy(Tensor(np.zeros((2, 3))), [0, 2])
    assert abs(loss.item() - math.log(3.0)) < 1e-12

    # ignored rows do not count toward the mean
    logits = Tensor([[0.0, 0.0], [100.0, -100.0]])
    assert abs(ad.cross_entropy(logits, [0, IGNORE_INDEX]).item() - math.log(2.0)) < 1e-12

    with pytest.raises(EmptyLossError):
        ad.cross_entropy(logits, [IGNORE_INDEX, IGNORE_INDEX])
    with pytest.raises(LabelError):
        ad.cross_entropy(logits, [0, 2])


def test_backward_of_elementwise_product():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(a * b)
        tape.backward(loss)
    np.testing.assert_allclose(a.grad, b.data)
    np.testing.assert_allclose(b.grad, a.data)

    err = finite_diff_check(lambda x: ad.sum_all(x * b), a)
    if err >= 1e-6:
        raise AssertionError(f"finite difference disagreement {err}")


def test_gradient_accumulates_over_reuse():
    x = Tensor([1.5, -2.0], requires_grad=True)
    with Tape() as tape:
        tape.backward(ad.sum_all(x * x + x))
    np.testing.assert_allclose(x.grad, 2.0 * x.data + 1.0)


def test_constants_and_detached_tensors_get_no_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([3.0, 4.0])
    with Tape() as tape:
        d = x.detach()
        tape.backward(ad.sum_all(x * c + d))
    assert c.grad is None
    assert d.grad is None
    np.testing.assert_allclose(x.grad, c.data)


def test_nothing_recorded_without_tape():
    x = Tensor([1.0], requires_grad=True)
    y = ad.gelu(x)
    assert y.node_id is None
    with pytest.raises(StateError):
        ad.backward(ad.sum_all(y))


def test_backward_runs_once():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(x)
        tape.backward(loss)
        with pytest.raises(StateError):
            tape.backward(loss)


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        with pytest.raises(ShapeError):
            tape.backward(ad.gelu(x))


def test_tape_nodes_topologically_ordered():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        ad.sum_all(ad.matmul(ad.gelu(x), x))
    for i, node in enumerate(tape.nodes):
        for j in node.inputs:
            if j is not None and j >= i:
                raise AssertionError(f"node {i} consumes later node {j}")


def test_embedding_backward_scatters_rows():
    table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    ids = np.array([[1, 1, 3]])
    with Tape() as tape:
        tape.backward(ad.sum_all(ad.embedding(table, ids)))
    np.testing.assert_allclose(table.grad, [[0, 0, 0], [2, 2, 2], [0, 0, 0], [1, 1, 1]])
    with pytest.raises(LabelError):
        ad.embedding(table, np.array([4]))


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 1))))


def test_sgd_step():
    p = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(StateError):
        ad.sgd_step([p], 0.1)
    p.grad = np.array([10.0, -10.0])
    ad.sgd_step({"p": p}, 0.1)
    np.testing.assert_allclose(p.data, [0.0, 3.0])
    assert p.grad is None


def test_finite_diff_check_preconditions():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(PreconditionError):
        finite_diff_check(ad.sum_all, x, step=0.0)
    with pytest.raises(PreconditionError):
        finite_diff_check(ad.sum_all, Tensor([1.0]))

    rng = np.random.default_rng(3)
    with pytest.raises(OracleError):
        finite_diff_check(lambda t: ad.scale(ad.sum_all(t), float(rng.normal())), x)


def test_corrupted_derivative_is_detected():
    x = Tensor(np.random.default_rng(2).normal(size=(2, 3)), requires_grad=True)
    assert finite_diff_check(lambda t: ad.sum_all(ad.gelu(t)), x) < 1e-4
    with corrupted_derivative("gelu"):
        err = finite_diff_check(lambda t: ad.sum_all(ad.gelu(t)), x)
    print(f"corrupted gelu error {err}")
    assert err > 0.1


def test_cross_entropy_saturation_and_gradient():
    assert abs(ad.cross_entropy(Tensor(np.zeros((1, 4))), [1]).item() - math.log(4.0)) < 1e-12
    assert ad.cross_entropy(Tensor([[30.0, -30.0]]), [0]).item() < 1e-9

    logits = Tensor(np.random.default_rng(5).normal(size=(3, 4)), requires_grad=True)
    targets = [2, 0, 3]
    with Tape() as tape:
        tape.backward(ad.cross_entropy(logits, targets))
    expected = ad.softmax(Tensor(logits.data), axis=-1).data - np.eye(4)[targets]
    np.testing.assert_allclose(logits.grad, expected / 3.0, atol=1e-12)


def test_mse_examples():
    assert ad.mse(Tensor([1.0, 2.0]), [1.0, 2.0]).item() == 0.0
    assert ad.mse(Tensor([0.0]), [2.0]).item() == 4.0
    assert ad.mse(Tensor([1.0, 3.0]), [0.0, 0.0]).item() == 5.0
    with pytest.raises(ShapeError):
        ad.mse(Tensor([1.0, 3.0]), [0.0])


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        tape.backward(x * x)
    assert float(x.grad) == 6.0
