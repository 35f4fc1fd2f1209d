"""Every tape op is checked against the central-difference oracle."""

import numpy as np
import pytest

from sogs import autodiff as ad
from sogs.errors import UsageError
from sogs.numerics import finite_difference_gradient


def check_grad(build, x0, atol=1e-6, h=1e-5):
    """FD-check d(scalar)/dx for a graph built from a flat parameter vector."""
    x0 = np.asarray(x0, dtype=np.float64)

    def value_at(xf):
        return ad.as_tensor(build(ad.constant(xf.reshape(x0.shape)))).value.item()

    leaf = ad.parameter(x0)
    out = build(leaf)
    out.backward()
    numeric = finite_difference_gradient(value_at, x0.ravel(), h=h)
    np.testing.assert_allclose(leaf.grad.ravel(), numeric, atol=atol)


RNG = np.random.default_rng(2024)


def test_add_mul_broadcast():
    b = RNG.standard_normal((1, 4))
    check_grad(lambda x: ad.tsum(x * ad.constant(b) + x + 2.0), RNG.standard_normal((3, 4)))


def test_sub_div():
    d = RNG.standard_normal((3, 2)) + 3.0
    check_grad(lambda x: ad.tsum(ad.div(ad.sub(x, 1.5), ad.constant(d))),
               RNG.standard_normal((3, 2)))

    # denominator side
    check_grad(lambda x: ad.tsum(ad.div(ad.constant(d), x)),
               RNG.standard_normal((3, 2)) + 4.0)


def test_power_sqrt_log_exp():
    x0 = RNG.uniform(0.5, 2.0, size=7)
    check_grad(lambda x: ad.tsum(ad.power(x, 3.0)), x0)
    check_grad(lambda x: ad.tsum(ad.sqrt(x)), x0)
    check_grad(lambda x: ad.tsum(ad.log(x)), x0)
    check_grad(lambda x: ad.tsum(ad.exp(x)), RNG.standard_normal(7))


def test_matmul():
    b = RNG.standard_normal((4, 2))
    check_grad(lambda x: ad.tsum(ad.matmul(x, ad.constant(b))), RNG.standard_normal((3, 4)))
    a = RNG.standard_normal((3, 4))
    check_grad(lambda x: ad.tsum(ad.matmul(ad.constant(a), x)), RNG.standard_normal((4, 2)))


def test_linear_batched_and_single():
    w0 = RNG.standard_normal((3, 5))
    b0 = RNG.standard_normal(3)
    x0 = RNG.standard_normal((4, 5))
    cof = RNG.standard_normal((4, 3))
    check_grad(lambda x: ad.tsum(ad.linear(x, ad.constant(w0), ad.constant(b0)) * ad.constant(cof)), x0)
    check_grad(lambda w: ad.tsum(ad.linear(ad.constant(x0), w, ad.constant(b0)) * ad.constant(cof)), w0)
    check_grad(lambda b: ad.tsum(ad.linear(ad.constant(x0), ad.constant(w0), b) * ad.constant(cof)), b0)
    # 1-D input path
    check_grad(lambda w: ad.tsum(ad.linear(ad.constant(x0[0]), w, ad.constant(b0))), w0)


def test_linear_weight_gradient_is_outer_product():
    # For L = sum(W x + b) the weight gradient is the outer product of ones and x.
    x = ad.constant(np.array([1.0, -2.0, 0.5]))
    w = ad.parameter(np.zeros((2, 3)))
    b = ad.parameter(np.zeros(2))
    ad.tsum(ad.linear(x, w, b)).backward()
    np.testing.assert_array_equal(w.grad, np.outer(np.ones(2), x.value))
    np.testing.assert_array_equal(b.grad, np.ones(2))


def test_nonlinearities():
    x0 = RNG.standard_normal(9) * 2.0
    cof = RNG.standard_normal(9)
    for op in (ad.relu, ad.sigmoid, ad.softplus, ad.absolute):
        check_grad(lambda x, op=op: ad.tsum(op(x) * ad.constant(cof)), x0)


def test_sigmoid_softplus_extreme_inputs_are_stable():
    x = ad.constant(np.array([-800.0, -30.0, 0.0, 30.0, 800.0]))
    s = ad.sigmoid(x).value
    assert np.all(np.isfinite(s)) and np.all((s >= 0) & (s <= 1))
    sp = ad.softplus(x).value
    assert np.all(np.isfinite(sp)) and sp[0] == 0.0 and abs(sp[-1] - 800.0) < 1e-9


def test_clip_zero_gradient_outside_band():
    x = ad.parameter(np.array([-1.0, 0.5, 2.0]))
    ad.tsum(ad.clip(x, 0.0, 1.0)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_reductions():
    x0 = RNG.standard_normal((3, 4, 2))
    cof = RNG.standard_normal((3, 2))
    cof4 = RNG.standard_normal(4)
    check_grad(lambda x: ad.tsum(ad.tsum(x, axis=1) * ad.constant(cof)), x0)
    check_grad(lambda x: ad.tsum(ad.tmean(x, axis=(0, 2)) * ad.constant(cof4)), x0)
    check_grad(lambda x: ad.tmean(x), x0)
    check_grad(lambda x: ad.tsum(ad.tsum(x, axis=0, keepdims=True)), x0)


def test_shape_ops():
    x0 = RNG.standard_normal((2, 6))
    c34 = RNG.standard_normal((3, 4))
    c62 = RNG.standard_normal((6, 2))
    check_grad(lambda x: ad.tsum(ad.reshape(x, (3, 4)) * ad.constant(c34)), x0)
    check_grad(lambda x: ad.tsum(ad.transpose(x) * ad.constant(c62)), x0)
    x1 = RNG.standard_normal((2, 3, 4))
    c423 = RNG.standard_normal((4, 2, 3))
    check_grad(lambda x: ad.tsum(ad.transpose(x, (2, 0, 1)) * ad.constant(c423)), x1)


def test_concat_stack():
    a0 = RNG.standard_normal((2, 3))
    cof = RNG.standard_normal((2, 6))
    check_grad(lambda x: ad.tsum(ad.concat([x, ad.constant(a0)], axis=1) * ad.constant(cof)), a0)
    cof2 = RNG.standard_normal((2, 2, 3))
    check_grad(lambda x: ad.tsum(ad.stack([x, x], axis=0) * ad.constant(cof2)), a0)


def test_getitem_slice_and_fancy():
    x0 = RNG.standard_normal((5, 3))
    check_grad(lambda x: ad.tsum(x[1:4, :2]), x0)
    idx = np.array([0, 2, 2, 4])  # repeated index exercises scatter-add
    c43 = RNG.standard_normal((4, 3))
    check_grad(lambda x: ad.tsum(x[idx] * ad.constant(c43)), x0)


def test_index_select():
    x0 = RNG.standard_normal((6, 2))
    idx = np.array([5, 0, 0, 3])
    c42 = RNG.standard_normal((4, 2))
    check_grad(lambda x: ad.tsum(ad.index_select(x, idx) * ad.constant(c42)), x0)


def test_pad_replicate2d():
    x0 = RNG.standard_normal((4, 5, 3))
    cof = RNG.standard_normal((8, 9, 3))
    check_grad(lambda x: ad.tsum(ad.pad_replicate2d(x, 2) * ad.constant(cof)), x0)


def test_correlate1d_valid():
    kernel = np.array([1.0, 2.0, 1.0])
    x0 = RNG.standard_normal((6, 5, 3))
    cof = RNG.standard_normal((4, 5, 3))
    check_grad(lambda x: ad.tsum(ad.correlate1d_valid(x, kernel, axis=0) * ad.constant(cof)), x0)
    cof2 = RNG.standard_normal((6, 3, 3))
    check_grad(lambda x: ad.tsum(ad.correlate1d_valid(x, kernel, axis=1) * ad.constant(cof2)), x0)


def test_correlate1d_matches_numpy_convolve():
    kernel = np.array([0.25, 0.5, 0.25])
    x = RNG.standard_normal(10)
    got = ad.correlate1d_valid(ad.constant(x.reshape(10, 1, 1)), kernel, axis=0).value.ravel()
    expected = np.convolve(x, kernel[::-1], mode="valid")
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_detach_blocks_gradient():
    x = ad.parameter(np.array([2.0]))
    y = ad.tsum(x.detach() * x)
    y.backward()
    np.testing.assert_array_equal(x.grad, [2.0])  # only the live factor


def test_zero_upstream_gives_zero_grads():
    x = ad.parameter(RNG.standard_normal((3, 3)))
    out = ad.tsum(ad.sigmoid(x))
    out.backward(grad_output=np.zeros(()))
    np.testing.assert_array_equal(x.grad, np.zeros((3, 3)))


def test_grad_accumulates_on_reuse():
    x = ad.parameter(np.array([3.0]))
    y = x * x  # x used twice
    y.backward()
    np.testing.assert_allclose(x.grad, [6.0])


def test_backward_usage_errors():
    with pytest.raises(UsageError):
        ad.constant(np.ones(3)).backward()  # no recorded forward
    with pytest.raises(UsageError):
        (ad.parameter(np.ones(3)) * 2.0).backward()  # non-scalar without seed


def test_constant_subgraphs_record_nothing():
    a = ad.constant(np.ones(4))
    b = ad.exp(a) * 3.0
    assert not b.requires_grad and b._vjp is None
