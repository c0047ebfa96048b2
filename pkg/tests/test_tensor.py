"""Autodiff primitives: values and gradients against finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sleepscore.core import tensor as T
from sleepscore.core.tensor import Tensor
from sleepscore.errors import NumericError, ShapeError

from gradcheck import max_rel_error, random_tensor

TOL = 1e-4


def test_add_mul_broadcast_grads():
    rng = np.random.default_rng(0)
    a = random_tensor(rng, (3, 4))
    b = random_tensor(rng, (4,))
    c = random_tensor(rng, (3, 1))
    proj = Tensor(rng.standard_normal((3, 4)), dtype=np.float64)

    def build():
        return ((a + b) * c * proj).sum()

    assert max_rel_error(build, [a, b, c]) < TOL


def test_div_pow_exp_log_grads():
    rng = np.random.default_rng(1)
    a = Tensor(rng.uniform(0.5, 2.0, (2, 3)), dtype=np.float64,
               requires_grad=True)
    b = Tensor(rng.uniform(0.5, 2.0, (2, 3)), dtype=np.float64,
               requires_grad=True)

    def build():
        return (T.log(a / b) + T.exp(b * 0.3) + a ** 1.7).sum()

    assert max_rel_error(build, [a, b]) < TOL


def test_matmul_grads_batched():
    rng = np.random.default_rng(2)
    a = random_tensor(rng, (2, 3, 4))
    b = random_tensor(rng, (4, 5))
    proj = Tensor(rng.standard_normal((2, 3, 5)), dtype=np.float64)

    def build():
        return (T.matmul(a, b) * proj).sum()

    assert max_rel_error(build, [a, b]) < TOL


def test_reductions_and_shapes_grads():
    rng = np.random.default_rng(3)
    a = random_tensor(rng, (3, 4, 2))

    def build():
        x = a.mean(axis=(1,)) + a.sum(axis=2).reshape(3, 4).mean(axis=1,
                                                                 keepdims=True)
        return (x * x).sum()

    assert max_rel_error(build, [a]) < TOL


def test_getitem_concat_stack_grads():
    rng = np.random.default_rng(4)
    a = random_tensor(rng, (4, 6))
    b = random_tensor(rng, (4, 2))

    def build():
        left = a[:, :3]
        right = a[:, 3:]
        joined = T.concat([left * 2.0, right, b], axis=1)
        rows = T.stack([joined[i] for i in range(4)], axis=0)
        return (rows * rows).sum()

    assert max_rel_error(build, [a, b]) < TOL


def test_fancy_index_gather_grad():
    rng = np.random.default_rng(5)
    a = random_tensor(rng, (5, 3))
    idx = np.array([0, 2, 1, 1, 0])

    def build():
        return (a[np.arange(5), idx] ** 2.0).sum()

    assert max_rel_error(build, [a]) < TOL


def test_tanh_sigmoid_clamp_softmax_grads():
    rng = np.random.default_rng(6)
    a = random_tensor(rng, (3, 5))

    def build():
        x = T.tanh(a) + T.sigmoid(a * 0.5)
        x = T.clamp(x, -0.8, 1.6)
        return (T.softmax(x, axis=-1) * Tensor(np.arange(5.0))).sum()

    assert max_rel_error(build, [a]) < TOL


def test_softmax_values_and_stability():
    x = Tensor(np.array([np.log(2.0), 0.0, 0.0]))
    out = T.softmax(x).numpy()
    np.testing.assert_allclose(out, [0.5, 0.25, 0.25], atol=1e-6)

    zero = T.softmax(Tensor(np.zeros(3))).numpy()
    np.testing.assert_allclose(zero, np.ones(3) / 3, atol=1e-7)

    huge = T.softmax(Tensor(np.array([1e4, 1e4 - 5.0]))).numpy()
    assert np.all(np.isfinite(huge))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1,
                max_size=12),
       st.floats(min_value=-30, max_value=30))
def test_softmax_sums_to_one_and_shift_invariant(values, shift):
    x = np.array(values, dtype=np.float64)
    p = T.softmax(Tensor(x)).numpy()
    assert abs(p.sum() - 1.0) < 1e-6
    q = T.softmax(Tensor(x + shift)).numpy()
    np.testing.assert_allclose(p, q, atol=1e-6)


def test_backward_requires_scalar():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        (a * 2).backward()


def test_backward_accumulates_across_uses():
    a = Tensor(np.array([3.0]), requires_grad=True)
    y = a * a + a  # dy/da = 2a + 1 = 7
    y.backward()
    np.testing.assert_allclose(a.grad, [7.0])


def test_intermediate_grads_freed_unless_retained():
    a = Tensor(np.ones(3), requires_grad=True)
    mid = a * 2.0
    out = (mid * mid).sum()
    out.backward()
    assert mid.grad is None
    assert a.grad is not None

    a.grad = None
    mid = a * 2.0
    out = (mid * mid).sum()
    out.backward(retain=[mid])
    assert mid.grad is not None


def test_forward_backward_deterministic():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.standard_normal((4, 6)).astype(np.float32),
                   requires_grad=True)
        w = Tensor(rng.standard_normal((6, 3)).astype(np.float32),
                   requires_grad=True)
        loss = (T.softmax(T.matmul(x, w)) ** 2.0).sum()
        loss.backward(retain=[x, w])
        return loss.item(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)


def test_check_finite_flag():
    T.set_check_finite(True)
    try:
        bad = Tensor(np.array([0.0]), requires_grad=True)
        with pytest.raises(NumericError):
            T.log(bad)  # log(0) = -inf
    finally:
        T.set_check_finite(False)
