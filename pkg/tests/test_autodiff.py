import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from molmgm import autodiff as ad
from molmgm.autodiff import Value


def leaf(x):
    return Value(np.array(x, dtype=np.float64), requires_grad=True)


def test_matmul_identity_and_values():
    m = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(ad.matmul(Value(np.eye(3)), Value(m)).data, m)
    a = Value(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal((a @ Value(np.eye(2))).data, a.data)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        ad.matmul(Value(np.ones((2, 3))), Value(np.ones((2, 2))))


def test_matmul_gradient_all_ones_column():
    a = leaf(np.random.default_rng(0).normal(size=(3, 2)))
    b = Value(np.ones((2, 1)))
    ad.backward(ad.vsum(a @ b))
    assert np.array_equal(a.grad, np.ones((3, 2)))
    err = ad.finite_diff_check(lambda x: ad.vsum(x @ b), a, h=1e-6)
    assert err < 1e-8


def test_fast_matmul_agrees_and_restores():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    exact = ad.matmul(Value(a), Value(b)).data
    with ad.fast_matmul():
        fast = ad.matmul(Value(a), Value(b)).data
    np.testing.assert_allclose(fast, exact, rtol=1e-13)
    assert ad._row_exact


def test_silu_values_and_gradient():
    assert ad.silu(Value(0.0)).item() == 0.0
    assert ad.silu(Value(1.0)).item() == pytest.approx(0.7310585786, abs=1e-10)
    x = leaf(0.0)
    ad.backward(ad.silu(x))
    assert x.grad == pytest.approx(0.5)
    assert ad.finite_diff_check(lambda v: ad.vsum(ad.silu(v)), leaf([-1.0, 0.0, 1.0]), h=1e-5) < 1e-6


def test_cosine_examples():
    u = Value(np.array([0.3, -2.0, 5.0]))
    assert ad.cosine_similarity(u, u).item() == pytest.approx(1.0, abs=1e-15)
    assert ad.cosine_similarity(Value([1.0, 0.0]), Value([0.0, 1.0])).item() == 0.0
    assert ad.cosine_similarity(Value([1.0, 1.0]), Value([1.0, 0.0])).item() == pytest.approx(0.7071067812, abs=1e-10)


def test_cosine_degenerate():
    with pytest.raises(ad.DegenerateVectorError):
        ad.cosine_similarity(Value([0.0, 0.0]), Value([1.0, 0.0]))


def test_stop_gradient():
    x = leaf([1.5, -2.0])
    sg = ad.stop_gradient(x)
    assert np.array_equal(sg.data, x.data) and not sg.requires_grad
    assert np.array_equal(ad.stop_gradient(sg).data, x.data)
    ad.backward(ad.vsum(sg) + 0.0 * ad.vsum(x))
    assert np.array_equal(x.grad, np.zeros(2))
    x.zero_grad()
    ad.backward(ad.vsum(x + ad.stop_gradient(x)))
    assert np.array_equal(x.grad, np.ones(2))


def test_backward_basics():
    x = leaf([1.0, 2.0])
    ad.backward(ad.vsum(x * x))
    assert np.array_equal(x.grad, [2.0, 4.0])
    with pytest.raises(ad.ShapeError):
        ad.backward(leaf([1.0, 2.0]) * 2.0)


def test_gradients_zero_for_unreachable():
    a, b = leaf([1.0]), leaf([2.0])
    g = ad.gradients(ad.vsum(a * 3.0), {"a": a, "b": b})
    assert g["a"][0] == 3.0 and g["b"][0] == 0.0


def test_three_layer_composition_fd():
    rng = np.random.default_rng(0)
    w1, w2, w3 = (Value(rng.normal(size=s)) for s in [(4, 6), (6, 5), (5, 1)])

    def f(x):
        return ad.vsum(ad.tanh(ad.silu(x @ w1) @ w2) @ w3)

    assert ad.finite_diff_check(f, leaf(rng.normal(size=(3, 4))), h=1e-5) < 1e-4


def test_finite_diff_check_linear():
    assert ad.finite_diff_check(lambda v: ad.vsum(v), leaf([1.0, -3.0, 2.0]), h=1e-3) < 1e-10


def test_backward_deterministic():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(4, 4))
    grads = []
    for _ in range(2):
        x = leaf(w)
        ad.backward(ad.vsum(ad.softmax(x @ x, axis=-1) * ad.layer_norm(x)))
        grads.append(x.grad)
    assert np.array_equal(grads[0], grads[1])


def test_invariant_sum_order_free():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(7, 3)) * 10.0 ** rng.integers(-8, 8, size=(7, 1))
    for _ in range(20):
        p = rng.permutation(7)
        assert np.array_equal(ad.invariant_sum(Value(x[p]), axis=0).data, ad.invariant_sum(Value(x), axis=0).data)


UNARY = {
    "exp": ad.exp, "tanh": ad.tanh, "sigmoid": ad.sigmoid, "silu": ad.silu, "cos": ad.cos,
    "sqrt": lambda v: ad.sqrt(v * v + 1.0), "log": lambda v: ad.log(v * v + 1.0),
    "layer_norm": ad.layer_norm, "softmax": lambda v: ad.softmax(v, axis=-1),
    "power": lambda v: ad.power(v * v + 1.0, 1.5), "div": lambda v: v / (v * v + 2.0),
    "invariant_sum": lambda v: ad.invariant_sum(v * v, axis=0), "swap_last": lambda v: ad.swap_last(v) * 2.0,
    "mean": lambda v: ad.mean(v * v, axis=1),
    "cosine": lambda v: ad.cosine_similarity(v, v * v + 1.0, axis=-1),
    "split_concat": lambda v: ad.concat(ad.split(v, 2, axis=-1)[::-1], axis=-1) * v,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_operation_gradients_ten_random_inputs(name):
    fn = UNARY[name]
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = leaf(rng.normal(size=(3, 4)))
        weights = rng.normal(size=fn(x).shape)  # a generic linear functional of the output
        err = ad.finite_diff_check(lambda v: ad.vsum(fn(v) * weights), x, h=1e-5)
        assert err < 1e-4, (name, seed, err)


def test_einsum_gradient():
    rng = np.random.default_rng(5)
    b = Value(rng.normal(size=(2, 3, 4)))
    x = leaf(rng.normal(size=(2, 3, 5)))
    assert ad.finite_diff_check(lambda v: ad.vsum(ad.einsum("bun,bud->bnd", v, b) ** 2), x, h=1e-5) < 1e-6


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
                  elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    s = ad.softmax(Value(x), axis=-1).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, rtol=1e-12)
    assert np.all(s >= 0)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 6), elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_stop_gradient_forward_exact(x):
    assert np.array_equal(ad.stop_gradient(Value(x)).data, x)


def test_silu_matches_math():
    for v in (-3.0, -0.5, 0.25, 4.0):
        assert ad.silu(Value(v)).item() == pytest.approx(v / (1.0 + math.exp(-v)), rel=1e-14)
