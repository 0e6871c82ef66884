"""Reverse-mode gradients against central finite differences."""

import numpy as np
import pytest

from sphreg import autodiff as ag


def fd_grad(fn, x, step=1e-6):
    """Central finite-difference gradient of a scalar fn at x."""
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + step
        hi = fn(x)
        xf[i] = orig - step
        lo = fn(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2 * step)
    return grad


def check(fn, x, step=1e-6, tol=1e-6):
    t = ag.Tensor(x.copy())
    out = fn(t)
    loss = ag.reduce_sum(out) if out.value.ndim else out
    loss.backward()
    numeric = fd_grad(lambda v: float(np.sum(ag.value_of(fn(ag.Tensor(v))))),
                      x.copy(), step)
    denom = np.maximum(np.abs(numeric), 1e-3)
    err = np.abs(t.grad - numeric) / denom
    assert err.max() < tol, f"max rel err {err.max():.3e}"


def test_plain_arrays_pass_through():
    a = np.ones((2, 3))
    assert isinstance(ag.add(a, a), np.ndarray)
    assert isinstance(ag.mul(a, 2.0), np.ndarray)
    assert isinstance(ag.softmax_rows(a), np.ndarray)


def test_tensor_in_tensor_out():
    t = ag.Tensor(np.ones((2, 2)))
    assert ag.is_tensor(ag.add(t, 1.0))
    assert ag.is_tensor(ag.softmax_rows(t))


def test_add_mul_chain_gradient():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 3))
    w = rng.standard_normal((4, 3))
    check(lambda t: ag.mul(ag.add(t, 2.0), w), x)


def test_matmul_gradient():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((5, 4))
    w = rng.standard_normal((4, 3))
    check(lambda t: ag.matmul(t, w), x)


def test_einsum2_gradient_both_args():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((6, 3, 2))
    b = rng.standard_normal((6, 2))
    check(lambda t: ag.einsum2("tij,tj->ti", t, b), a)
    check(lambda t: ag.einsum2("tij,tj->ti", a, t), b)


def test_unary_gradients():
    rng = np.random.default_rng(3)
    x = 0.5 + rng.random((3, 3))
    check(ag.exp, x)
    check(ag.log, x)
    check(ag.sqrt, x)
    check(ag.square, x)


def test_relu_and_leaky_gradient_away_from_kink():
    x = np.array([[-2.0, -0.5], [0.5, 2.0]])
    check(ag.relu, x)
    check(ag.leaky_relu, x)


def test_reduce_ops_gradient():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, 5))
    check(lambda t: ag.reduce_sum(t, axis=0), x)
    check(lambda t: ag.reduce_mean(t, axis=1), x)


def test_take_rows_and_segment_sum_gradient():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((6, 3))
    idx = np.array([0, 0, 2, 5, 3])
    seg = np.array([0, 1, 1, 0, 2])
    check(lambda t: ag.segment_sum(ag.take_rows(t, idx), seg, 3), x)


def test_concat_and_slice_gradient():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((5, 2))
    check(lambda t: ag.concat([ag.slice_rows(t, 0, 3),
                               ag.slice_rows(t, 2, 5)], axis=0), x)


def test_softmax_rows_gradient_and_rows_sum_to_one():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((5, 4))
    probs = ag.softmax_rows(x)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    w = rng.standard_normal((5, 4))
    check(lambda t: ag.mul(ag.softmax_rows(t), w), x)


def test_row_normalize_gradient_and_unit_row_snap():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((5, 3)) * 2.0
    out = ag.row_normalize(x)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)
    unit = x / np.linalg.norm(x, axis=1, keepdims=True)
    assert ag.row_normalize(unit.copy()) is not unit  # copies, but ...
    np.testing.assert_array_equal(ag.row_normalize(unit.copy()), unit)
    w = rng.standard_normal((5, 3))
    check(lambda t: ag.mul(ag.row_normalize(t), w), x)


def test_cross_gradient():
    rng = np.random.default_rng(9)
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal((4, 3))
    check(lambda t: ag.cross(t, b), a)
    check(lambda t: ag.cross(a, t), b)


def test_smooth_rotation_kernels_match_reference_values():
    t = np.array([1e-18, 1e-9, 1e-4, 0.25, 1.0, 4.0])
    root = np.sqrt(t)
    np.testing.assert_allclose(ag.value_of(ag.sinc_sq(t)),
                               np.sin(root) / root, rtol=1e-12)
    np.testing.assert_allclose(ag.value_of(ag.cosc_sq(t))[3:],
                               (1 - np.cos(root[3:])) / t[3:], rtol=1e-12)
    # series branch agrees with the analytic limit 1/2 - t/24 + ...
    np.testing.assert_allclose(ag.value_of(ag.cosc_sq(np.array([0.0]))), 0.5,
                               rtol=1e-15)


def test_smooth_kernel_gradients():
    x = np.array([[1e-5, 1e-3], [0.3, 2.0]])
    check(ag.sinc_sq, x, step=1e-7, tol=2e-5)
    check(ag.cosc_sq, x, step=1e-7, tol=2e-5)
    c = np.array([[-0.5, 0.0], [0.4, 0.9]])
    check(ag.arc_over_sin, c, step=1e-7, tol=2e-5)


def test_arc_over_sin_matches_definition():
    c = np.array([-0.9, -0.2, 0.0, 0.3, 0.999])
    expected = np.arccos(c) / np.sqrt(1 - c * c)
    np.testing.assert_allclose(ag.value_of(ag.arc_over_sin(c)), expected,
                               rtol=1e-10)
    # limit c -> 1 is 1
    near = ag.value_of(ag.arc_over_sin(np.array([1 - 1e-14])))
    np.testing.assert_allclose(near, 1.0, atol=1e-6)


def test_gradient_accumulates_over_reused_node():
    x = ag.Tensor(np.array([[2.0]]))
    y = ag.add(ag.mul(x, 3.0), ag.mul(x, 4.0))
    ag.reduce_sum(y).backward()
    np.testing.assert_allclose(x.grad, [[7.0]])


def test_operator_overloads():
    a = ag.Tensor(np.array([2.0]))
    b = ag.Tensor(np.array([3.0]))
    out = (a + b) * a - b / a + (-a) + a ** 2
    ag.reduce_sum(out).backward()
    # d/da [(a+b)a - b/a - a + a^2] = 2a + b + b/a^2 - 1 + 2a
    np.testing.assert_allclose(a.grad, [2 * 2 + 3 + 3 / 4 - 1 + 2 * 2])
    np.testing.assert_allclose(b.grad, [2 - 1 / 2])


def test_broadcast_gradient_unbroadcasts():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((4, 3))
    bias = rng.standard_normal((1, 3))
    check(lambda t: ag.add(x, t), bias)


def test_take_axis_gradient():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((3, 6))
    idx = np.array([1, 1, 4])
    check(lambda t: ag.take_axis(t, idx, axis=1), x)
