"""Tests for the tensor engine and the finite-difference oracle."""

import numpy as np
import pytest

from src.tools import autodiff as ad
from src.tools.autodiff import Tape, Tensor, grad_check, grad_check_parameters
from src.utils.exceptions import DivergenceError, ValidationError

TOL = 1e-5


def test_matmul_by_hand():
    out = ad.matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]])
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_rejects_mismatched_shapes():
    with pytest.raises(ValidationError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_add_rejects_unbroadcastable_shapes():
    with pytest.raises(ValidationError):
        ad.add(np.ones(3), np.ones(4))


def test_odd_functions_vanish_at_origin():
    zero = Tensor(np.zeros(3))
    for fn in (ad.tanh, ad.softsign, ad.hardtanh):
        np.testing.assert_array_equal(fn(zero).data, np.zeros(3))


def test_hardtanh_clips_to_unit_interval():
    np.testing.assert_array_equal(ad.hardtanh(np.array([2.0, -2.0, 0.5])).data, [1.0, -1.0, 0.5])


def test_tanh_gradient_at_zero_is_one():
    x = Tensor(np.zeros(4), requires_grad=True)
    x.tanh().sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones(4))


def test_gradients_accumulate_over_shared_parents():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * x + x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_only_leaves_keep_gradients():
    x = Tensor(np.array([0.3, -0.7]), requires_grad=True)
    hidden = x * 2.0
    hidden.tanh().sum().backward()
    assert x.grad is not None
    assert hidden.grad is None


def test_tape_orders_parents_first():
    x = Tensor(np.ones(2), requires_grad=True)
    y = (x * 3.0).tanh()
    tape = Tape.from_output(y.sum())
    position = {id(node): i for i, node in enumerate(tape.nodes)}
    assert position[id(x)] < position[id(y)]
    assert len(tape) == 4


def test_backward_needs_scalar_without_seed():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValidationError):
        (x * 2.0).backward()


def test_no_graph_without_requires_grad():
    out = ad.tanh(np.ones(2)) + 1.0
    assert not out.requires_grad
    assert out.is_leaf


@pytest.mark.parametrize(
    "fn",
    [
        lambda x: (x * x).sum(),
        lambda x: x.tanh().sum(),
        lambda x: x.softsign().sum(),
        lambda x: x.sigmoid().mean(),
        lambda x: (x / (x.square() + 1.0)).sum(),
        lambda x: (x.square() + 1.0).sqrt().sum(),
        lambda x: ad.norm(x.reshape(3, 2)).sum(),
        lambda x: ad.concat([x, x.tanh()]).sum(),
        lambda x: ad.stack([x, 2.0 * x], axis=0).square().sum(),
        lambda x: x[1:4].square().sum() + x[np.array([0, 0, 5])].sum(),
        lambda x: ad.sum_(ad.matmul(x.reshape(2, 3), np.arange(6.0).reshape(3, 2)).tanh()),
    ],
)
def test_primitive_gradients(fn, rng):
    x = rng.uniform(-2.0, 2.0, size=6)
    assert grad_check(fn, x) <= TOL


def test_signed_permute_gradient(rng):
    source = np.array([5, 4, 3, 2, 1, 0])
    sign = np.array([-1.0, 1.0, 1.0, -1.0, 1.0, -1.0])
    weights = rng.standard_normal(6)
    assert grad_check(lambda x: (x.signed_permute(source, sign) * weights).tanh().sum(), rng.uniform(-2, 2, 6)) <= TOL


def test_assemble_places_signed_blocks():
    block = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    cols = np.array([0, 1])
    out = ad.assemble((2, 2), [(block, np.array([0]), cols, 1.0), (block, np.array([1]), cols, -1.0)])
    np.testing.assert_array_equal(out.data, [[1.0, 2.0], [-1.0, -2.0]])
    (out * np.array([[1.0, 1.0], [3.0, 3.0]])).sum().backward()
    np.testing.assert_array_equal(block.grad, [[-2.0, -2.0]])


def test_grad_check_sum_of_squares(rng):
    assert grad_check(lambda x: (x * x).sum(), rng.standard_normal(10)) <= 1e-6


def test_grad_check_tanh_layer(rng):
    w = rng.standard_normal((4, 6))
    b = rng.standard_normal(4)

    def layer(x):
        return (ad.matmul(w, x.reshape(6, 1)).reshape(4) + b).tanh().sum()

    assert grad_check(layer, rng.standard_normal(6)) <= TOL


def test_grad_check_constant_function():
    assert grad_check(lambda x: Tensor(3.0), np.ones(4)) == 0.0


def test_grad_check_rejects_eps_out_of_range():
    with pytest.raises(ValidationError):
        grad_check(lambda x: x.sum(), np.ones(2), eps=1e-2)


def test_grad_check_reports_non_finite_values():
    with pytest.raises(DivergenceError):
        grad_check(lambda x: (x / 0.0).sum(), np.ones(2))


def test_grad_check_parameters_restores_values(rng):
    w = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    x = rng.standard_normal((5, 3))
    before = w.data.copy()
    errors = grad_check_parameters(lambda: ad.matmul(x, w).tanh().sum(), {"w": w}, max_coords=4)
    assert errors["w"] <= TOL
    np.testing.assert_array_equal(w.data, before)
