import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from phed.numerics import (
    GaussianParams,
    NonFiniteError,
    RngState,
    check_finite,
    finite_difference_check,
    layer_norm,
    log_softmax,
    matmul,
    sample_gaussian,
    softmax,
)


def test_matmul_identity_and_scalar():
    eye = torch.eye(2)
    b = torch.tensor([[3.0, 4.0], [5.0, 6.0]])
    assert torch.equal(matmul(eye, b), b)
    assert matmul(torch.tensor([[2.0]]), torch.tensor([[3.0]])).item() == 6.0


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    expect = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expect[i, j] += a[i, k] * b[k, j]
    got = matmul(torch.tensor(a), torch.tensor(b)).numpy()
    assert np.max(np.abs(got - expect)) < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        matmul(torch.zeros(2, 3), torch.zeros(2, 3))


def test_softmax_cases():
    assert torch.allclose(softmax(torch.zeros(3)), torch.full((3,), 1 / 3), atol=1e-15)
    big = softmax(torch.tensor([1000.0, 0.0]))
    assert torch.isfinite(big).all() and big[0] == 1.0 and big[1] < 1e-300
    mpmath.mp.dps = 50
    ex = [mpmath.exp(v) for v in (1, 2, 3)]
    oracle = [float(e / sum(ex)) for e in ex]
    got = softmax(torch.tensor([1.0, 2.0, 3.0])).tolist()
    assert max(abs(g - o) for g, o in zip(got, oracle)) < 1e-15


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(values):
    p = softmax(torch.tensor(values))
    assert abs(p.sum().item() - 1.0) < 1e-9 and (p >= 0).all()
    assert torch.allclose(log_softmax(torch.tensor(values)).exp(), p, atol=1e-12)


def test_layer_norm_cases():
    one, zero = torch.ones(4), torch.zeros(4)
    assert torch.equal(layer_norm(torch.full((4,), 7.0), one, zero), zero)
    two = layer_norm(torch.tensor([1.0, 3.0]), torch.ones(2), torch.zeros(2), epsilon=1e-12)
    assert torch.allclose(two, torch.tensor([-1.0, 1.0]), atol=1e-10)
    x = torch.tensor(np.random.default_rng(1).normal(size=6))
    xs = x.tolist()
    mean = sum(xs) / 6
    var = sum((v - mean) ** 2 for v in xs) / 6
    oracle = [(v - mean) / math.sqrt(var + 1e-5) for v in xs]
    assert max(abs(a - b) for a, b in zip(layer_norm(x, torch.ones(6), torch.zeros(6)).tolist(), oracle)) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=16))
def test_layer_norm_zero_mean(values):
    out = layer_norm(torch.tensor(values), torch.ones(len(values)), torch.zeros(len(values)))
    assert abs(out.mean().item()) < 1e-9


def test_sample_gaussian_degenerate_variance():
    mu = torch.tensor([0.5, -2.0])
    z = sample_gaussian(GaussianParams(mu, torch.full((2,), -1e4)), RngState(0))
    assert torch.equal(z, mu)


def test_sample_gaussian_moments():
    n = 100_000
    p = GaussianParams(torch.ones(n), torch.full((n,), math.log(0.25)))
    z = sample_gaussian(p, RngState(5))
    assert abs(z.mean().item() - 1.0) < 3 * 0.5 / math.sqrt(n)


def test_sample_gaussian_mean_gradient():
    mu = torch.tensor([0.3], requires_grad=True)
    lv = torch.tensor([0.0])

    def f():
        return sample_gaussian(GaussianParams(mu, lv), RngState(11)).sum()

    rep = finite_difference_check(f, [("mu", mu)])
    f().backward()
    assert abs(mu.grad.item() - 1.0) < 1e-9 and rep.max_rel_error < 1e-8


def test_sample_gaussian_rejects_nonfinite():
    with pytest.raises(NonFiniteError):
        sample_gaussian(GaussianParams(torch.tensor([float("nan")]), torch.zeros(1)), RngState(0))


def test_rng_determinism_and_state():
    a, b = RngState(42), RngState(42)
    assert torch.equal(a.normal((5,)), b.normal((5,)))
    state = a.get_state()
    first = a.normal((3,))
    a.set_state(state)
    assert torch.equal(a.normal((3,)), first)
    with pytest.raises(ValueError):
        RngState(-1)


def test_fd_check_polynomial_and_constant():
    x = torch.tensor([3.0], requires_grad=True)
    rep = finite_difference_check(lambda: (x**2).sum(), [("x", x)])
    assert rep.max_rel_error < 1e-8
    (x**2).sum().backward()
    assert abs(x.grad.item() - 6.0) < 1e-12
    y = torch.tensor([1.0, 2.0], requires_grad=True)
    rep = finite_difference_check(lambda: (y * 0).sum() + 4.0, [("y", y)])
    assert rep.max_abs_error == 0.0


@pytest.mark.parametrize(
    "fn",
    [
        lambda a, b: (matmul(a, b) ** 2).sum(),
        lambda a, b: (softmax(a @ b, axis=-1) * torch.arange(2.0)).sum(),
        lambda a, b: (layer_norm(a, b[:, 0].repeat(1)[:4] if False else torch.ones(4) * 1.3, torch.zeros(4)) * a).sum(),
        lambda a, b: log_softmax(a, axis=0).sum() * a.sum(),
    ],
)
def test_primitive_gradients(fn):
    gen = np.random.default_rng(7)
    a = torch.tensor(gen.normal(size=(3, 4)), requires_grad=True)
    b = torch.tensor(gen.normal(size=(4, 2)), requires_grad=True)
    rep = finite_difference_check(lambda: fn(a, b), [("a", a), ("b", b)])
    assert rep.max_rel_error < 1e-4


def test_check_finite():
    check_finite(torch.ones(2))
    with pytest.raises(NonFiniteError):
        check_finite(torch.tensor([1.0, float("inf")]))
