"""Tape mechanics and per-op gradient correctness."""
import numpy as np
import pytest

import evbridge.autodiff as ad
from evbridge.autodiff import DiffValue, Tape, backward, stop_gradient
from evbridge.errors import NumericError


def _fd_grad(f, x, h=1e-6):
    """Central finite differences of scalar f over array x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def _check_op(build, f, x, tol=1e-6):
    """Analytic vs finite-difference gradient of scalar build(leaf)."""
    tape = Tape()
    leaf = tape.leaf(x.copy(), key="x")
    grads = backward(tape, build(leaf))
    fd = _fd_grad(f, x.copy())
    assert np.allclose(grads["x"], fd, rtol=tol, atol=tol), \
        f"analytic {grads['x']} vs fd {fd}"


def test_add_mul_chain_gradient():
    x = np.array([0.3, -1.2, 2.0])
    _check_op(lambda v: ad.vsum(ad.mul(ad.add(v, v), v)),
              lambda a: ((a + a) * a).sum(), x)


def test_sub_scale_gradient():
    x = np.array([1.0, 2.0])
    _check_op(lambda v: ad.vsum(ad.scale(ad.sub(v, ad.mul(v, v)), 3.0)),
              lambda a: (3.0 * (a - a * a)).sum(), x)


def test_matvec_gradient_both_arguments():
    w0 = np.array([[0.5, -1.0], [2.0, 0.25]])
    x0 = np.array([1.5, -0.5])
    tape = Tape()
    w = tape.leaf(w0.copy(), key="w")
    x = tape.leaf(x0.copy(), key="x")
    grads = backward(tape, ad.vsum(ad.relu(ad.matvec(w, x))))
    fd_w = _fd_grad(lambda a: np.maximum(a @ x0, 0).sum(), w0.copy())
    fd_x = _fd_grad(lambda a: np.maximum(w0 @ a, 0).sum(), x0.copy())
    assert np.allclose(grads["w"], fd_w, atol=1e-6)
    assert np.allclose(grads["x"], fd_x, atol=1e-6)


def test_elementwise_nonlinearity_gradients():
    x = np.array([-0.8, 0.1, 1.7])
    _check_op(lambda v: ad.vsum(ad.sigmoid(v)),
              lambda a: (1 / (1 + np.exp(-a))).sum(), x)
    _check_op(lambda v: ad.vsum(ad.exp(v)), lambda a: np.exp(a).sum(), x)
    _check_op(lambda v: ad.vmean(ad.square(v)), lambda a: (a * a).mean(), x)


def test_log_floored_gradient_and_floor():
    x = np.array([0.5, 2.0])
    _check_op(lambda v: ad.vsum(ad.log_floored(v)),
              lambda a: np.log(a).sum(), x)
    # below the floor: clamped value, exactly zero gradient
    tape = Tape()
    leaf = tape.leaf(np.array([0.0, 1.0]), key="x")
    out = ad.log_floored(leaf)
    assert out.value[0] == np.log(ad.LOG_EPS)
    grads = backward(tape, ad.vsum(out))
    assert grads["x"][0] == 0.0 and grads["x"][1] == 1.0


def test_rsqrt_gradient():
    x = np.array([0.7, 3.0])
    _check_op(lambda v: ad.vsum(ad.rsqrt(v)),
              lambda a: (a ** -0.5).sum(), x)


def test_pick_gradient_is_one_hot():
    tape = Tape()
    leaf = tape.leaf(np.array([1.0, 2.0, 3.0]), key="x")
    grads = backward(tape, ad.scale(ad.pick(leaf, 1), 5.0))
    assert grads["x"].tolist() == [0.0, 5.0, 0.0]


def test_broadcast_scalar_times_vector_gradient():
    tape = Tape()
    s = tape.leaf(np.array(2.0), key="s")
    v = tape.leaf(np.array([1.0, -2.0, 3.0]), key="v")
    grads = backward(tape, ad.vsum(ad.mul(s, v)))
    assert grads["s"].shape == () and grads["s"] == 2.0
    assert grads["v"].tolist() == [2.0, 2.0, 2.0]


def test_constant_loss_has_zero_gradients():
    tape = Tape()
    leaf = tape.leaf(np.array([1.0, 2.0]), key="x")
    const = DiffValue(tape, np.array(4.0))
    grads = backward(tape, const)
    assert not grads["x"].any()


def test_stop_gradient_blocks_adjoints():
    tape = Tape()
    leaf = tape.leaf(np.array([1.0, 2.0]), key="x")
    grads = backward(tape, ad.vsum(ad.mul(stop_gradient(leaf), leaf)))
    # d/dx sg(x)*x = sg(x) only
    assert grads["x"].tolist() == [1.0, 2.0]


def test_shared_subexpression_accumulates():
    tape = Tape()
    leaf = tape.leaf(np.array(3.0), key="x")
    y = ad.add(ad.mul(leaf, leaf), ad.mul(leaf, leaf))
    grads = backward(tape, y)
    assert grads["x"] == pytest.approx(12.0)


def test_backward_twice_raises():
    tape = Tape()
    leaf = tape.leaf(np.array(1.0), key="x")
    loss = ad.square(leaf)
    backward(tape, loss)
    with pytest.raises(NumericError):
        backward(tape, loss)


def test_backward_rejects_vector_loss():
    tape = Tape()
    leaf = tape.leaf(np.array([1.0, 2.0]), key="x")
    with pytest.raises(NumericError):
        backward(tape, leaf)


def test_non_finite_value_rejected_on_entry():
    tape = Tape()
    with pytest.raises(NumericError):
        tape.leaf(np.array([1.0, np.nan]))


def test_mean_of_matches_numpy():
    tape = Tape()
    leaves = [tape.leaf(np.array(float(i)), key=f"x{i}") for i in range(4)]
    m = ad.mean_of(leaves)
    assert m.value == pytest.approx(1.5)
    grads = backward(tape, m)
    assert all(grads[f"x{i}"] == pytest.approx(0.25) for i in range(4))
