import numpy as np
import pytest

from segfusion import autodiff as ad
from segfusion.errors import ContractError, DimensionError, NumericError
from segfusion.gradcheck import PRIMITIVE_EPS, PRIMITIVE_TOL, PRIMITIVES

from oracles import matmul as loop_matmul


def test_matmul_identity():
    b = np.array([[3.0, 4.0], [5.0, 6.0]])
    out = ad.matmul(ad.const(np.eye(2)), ad.const(b))
    assert np.array_equal(out.values, b)


def test_matmul_hand_dot():
    out = ad.matmul(ad.const([[1.0, 2.0]]), ad.const([[3.0], [4.0]]))
    assert out.values.tolist() == [[11.0]]


def test_matmul_matches_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    assert np.abs(ad.matmul(ad.const(a), ad.const(b)).values - loop_matmul(a, b)).max() <= 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(ad.const(np.ones((2, 3))), ad.const(np.ones((2, 3))))


def test_matmul_gradient_of_sum():
    rng = np.random.default_rng(1)
    a, b = ad.param(rng.normal(size=(3, 4))), ad.param(rng.normal(size=(4, 2)))
    assert ad.grad_check(lambda x, y: ad.sum(ad.matmul(x, y)), [a, b], eps=1e-6) <= 1e-6


def test_softmax_uniform_row():
    out = ad.softmax_rows(ad.const([[0.0, 0.0, 0.0]]))
    assert np.allclose(out.values, 1.0 / 3.0)


def test_softmax_large_logit_is_stable():
    out = ad.softmax_rows(ad.const([[1000.0, 0.0]])).values
    assert np.isfinite(out).all()
    assert out[0, 0] == pytest.approx(1.0) and out[0, 1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        ad.softmax_rows(ad.const([[np.nan, 0.0]]))


def test_exp_and_concat_shapes():
    assert ad.exp(ad.const([[0.0]])).values.tolist() == [[1.0]]
    assert ad.concat_cols(ad.const(np.ones((2, 3))), ad.const(np.ones((2, 5)))).shape == (2, 8)


def test_log_domain_error():
    with pytest.raises(NumericError):
        ad.log(ad.const([[0.0]]))
    assert ad.log(ad.const([[0.0]]), floor=1e-12).item() == pytest.approx(np.log(1e-12))


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_every_primitive_gradient(name):
    rng = np.random.default_rng([0, sorted(PRIMITIVES).index(name)])
    for _ in range(10):
        f, inputs = PRIMITIVES[name](rng)
        assert ad.grad_check(f, inputs, eps=PRIMITIVE_EPS) <= PRIMITIVE_TOL


def test_backward_of_sum_is_ones():
    a = ad.param(np.arange(4.0).reshape(2, 2))
    ad.backward(ad.sum(a))
    assert np.array_equal(a.grad, np.ones((2, 2)))


def test_backward_product_pattern():
    a = ad.param([[1.0, 2.0], [3.0, 4.0]])
    b = ad.param([[5.0, 6.0], [7.0, 8.0]])
    ad.backward(ad.sum(ad.matmul(a, b)))
    # d sum(AB) / dA_ij = sum_k B_jk
    assert np.array_equal(a.grad, np.ones((2, 2)) @ b.values.T)
    assert np.array_equal(b.grad, a.values.T @ np.ones((2, 2)))


def test_backward_does_not_accumulate_across_calls():
    a = ad.param([[2.0]])
    root = ad.square(a)
    ad.backward(root)
    ad.backward(root)
    assert a.grad.tolist() == [[4.0]]


def test_shared_node_gradients_add():
    a = ad.param([[3.0]])
    ad.backward(ad.hadamard(a, a) + a)
    assert a.grad.tolist() == [[7.0]]


def test_backward_requires_scalar_root():
    with pytest.raises(ContractError):
        ad.backward(ad.param(np.ones((2, 2))))


def test_const_gets_no_gradient():
    c = ad.const([[1.0, 2.0]])
    x = ad.param([[3.0, 4.0]])
    grads = ad.backward(ad.sum(ad.hadamard(c, x)))
    assert c not in grads or not grads[c].any()
    assert np.array_equal(x.grad, c.values)


def test_values_are_read_only():
    x = ad.param([[1.0]])
    with pytest.raises(ValueError):
        x.values[0, 0] = 2.0


def test_grad_check_square_closed_form():
    x = ad.param(np.random.default_rng(2).normal(size=(3, 3)))
    assert ad.grad_check(lambda v: ad.sum(ad.square(v)), [x], eps=1e-6) <= 1e-7


def test_grad_check_constant_function():
    x = ad.param(np.ones((2, 2)))
    assert ad.grad_check(lambda v: ad.const([[3.0]]), [x]) == 0.0


def test_tape_is_topological():
    a = ad.param([[1.0]])
    b = ad.exp(a)
    c = ad.add(b, a)
    tape = ad.ComputationTape(c)
    order = {id(n): i for i, n in enumerate(tape.nodes)}
    assert order[id(a)] < order[id(b)] < order[id(c)]
    assert tape.leaves() == [a]
