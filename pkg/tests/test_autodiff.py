import math

import numpy as np
import pytest

from paralm import autodiff as F


def fd_check(fn, *arrays, eps=1e-6, tol=1e-7):
    """Compare tape gradients of sum(fn(...) * w) against central differences."""
    r = np.random.default_rng(0)
    vars_ = [F.Var(a.copy()) for a in arrays]
    out = fn(*vars_)
    w = r.standard_normal(out.value.shape)
    loss = F.mul(out, w)
    total = F.Var(np.asarray(loss.value.sum()), (loss,), lambda g: (np.full(loss.value.shape, g),))
    total.backward()
    for v, a in zip(vars_, arrays):
        num = np.zeros_like(a)
        for i in range(a.size):
            p = a.copy().reshape(-1)
            p[i] += eps
            up = (np.asarray(fn(*[p.reshape(a.shape) if x is a else x for x in arrays])) * w).sum()
            p[i] -= 2 * eps
            down = (np.asarray(fn(*[p.reshape(a.shape) if x is a else x for x in arrays])) * w).sum()
            num.reshape(-1)[i] = (up - down) / (2 * eps)
        np.testing.assert_allclose(v.grad, num, atol=tol, rtol=1e-6)


@pytest.fixture
def r():
    return np.random.default_rng(42)


def test_plain_arrays_pass_through(r):
    a = r.standard_normal((2, 3))
    assert isinstance(F.add(a, a), np.ndarray)
    assert isinstance(F.matmul(a, a.T), np.ndarray)


def test_matmul_grad(r):
    fd_check(F.matmul, r.standard_normal((3, 4)), r.standard_normal((4, 2)))
    fd_check(F.matmul, r.standard_normal((2, 3, 4)), r.standard_normal((4, 2)))
    fd_check(F.matmul, r.standard_normal((2, 3, 4)), r.standard_normal((2, 4, 5)))


def test_elementwise_grads(r):
    fd_check(F.add, r.standard_normal((3, 4)), r.standard_normal(4))
    fd_check(F.mul, r.standard_normal((2, 3)), r.standard_normal((2, 3)))
    fd_check(lambda a: F.scale(a, 0.37), r.standard_normal((3,)))
    fd_check(F.scale_rows, r.standard_normal((3, 4)), r.standard_normal(4))
    fd_check(F.scale_rows, r.standard_normal((2, 3, 4)), r.standard_normal((2, 4)))


@pytest.mark.parametrize("name", ["gelu", "silu"])
def test_activation_grad(name, r):
    fd_check(lambda x: F.activation(x, name), r.standard_normal((3, 5)))


def test_softmax_rmsnorm_rope_grads(r):
    fd_check(F.softmax, r.standard_normal((2, 5)))
    fd_check(lambda x, w: F.rmsnorm(x, w, 1e-6), r.standard_normal((3, 4)), r.standard_normal(4))
    ang = r.standard_normal((3, 2))
    fd_check(lambda x: F.rope(x, np.cos(ang), np.sin(ang)), r.standard_normal((2, 3, 4)))


def test_shape_ops_grads(r):
    fd_check(lambda x: F.reshape(x, (6, 2)), r.standard_normal((3, 4)))
    fd_check(lambda x: F.swapaxes(x, 0, 1), r.standard_normal((3, 4)))
    fd_check(lambda x: F.getitem(x, (np.array([0, 2, 2]), np.array([1, 0, 1]))), r.standard_normal((3, 4)))
    ids = np.array([[0, 2], [2, 1]])
    fd_check(lambda t: F.embedding(t, ids), r.standard_normal((3, 4)))


def scalar_cross_entropy(logits, targets, mask):
    total, n = 0.0, 0
    for b in range(len(logits)):
        for t in range(len(logits[b])):
            if not mask[b][t]:
                continue
            row = [float(x) for x in logits[b][t]]
            m = max(row)
            lse = m + math.log(sum(math.exp(x - m) for x in row))
            total += lse - row[targets[b][t]]
            n += 1
    return total / n


def test_cross_entropy_matches_scalar_script(r):
    logits = r.standard_normal((2, 3, 5))
    targets = r.integers(0, 5, size=(2, 3))
    mask = np.array([[False, True, True], [True, False, True]])
    got = float(F.cross_entropy(logits, targets, mask))
    assert abs(got - scalar_cross_entropy(logits, targets, mask)) < 1e-12


def test_cross_entropy_analytic_cases():
    V = 7
    assert abs(float(F.cross_entropy(np.zeros((1, 2, V)), np.zeros((1, 2), int), np.ones((1, 2), bool)))
               - math.log(V)) < 1e-14
    sharp = np.full((1, 1, 4), -50.0)
    sharp[0, 0, 2] = 50.0
    assert float(F.cross_entropy(sharp, np.array([[2]]), np.ones((1, 1), bool))) < 1e-40
    with pytest.raises(ValueError):
        F.cross_entropy(np.zeros((1, 2, 3)), np.zeros((1, 2), int), np.zeros((1, 2), bool))


def test_cross_entropy_grad(r):
    targets = r.integers(0, 5, size=(2, 3))
    mask = np.array([[False, True, True], [True, False, True]])
    fd_check(lambda x: F.cross_entropy(x, targets, mask), r.standard_normal((2, 3, 5)))


def test_inplace_variants(r):
    a = r.standard_normal((2, 3))
    v = r.standard_normal(3)
    expect = a * v
    out = F.scale_rows_(a, v)
    assert out is a and np.array_equal(a, expect)
    va = F.Var(r.standard_normal((2, 3)))
    before = va.value.copy()
    res = F.scale_rows_(va, v)
    assert isinstance(res, F.Var) and np.array_equal(va.value, before)


def test_gradient_accumulates_over_shared_use(r):
    x = F.Var(r.standard_normal(3))
    y = F.add(F.mul(x, 2.0), x)
    s = F.Var(np.asarray(y.value.sum()), (y,), lambda g: (np.full(3, g),))
    s.backward()
    np.testing.assert_allclose(x.grad, 3.0)
