import math

import numpy as np
import pytest
import torch

from ddprune.engine import (InnerBatch, backprop_through_training, cross_entropy, grad_inner, grad_of, hvp,
                            hvp_of, network_loss, unroll)
from ddprune.errors import InputDomainError, NumericError, StructuralError
from ddprune.models import forward, init_params


def _mlp_batch(seed=0, n=5):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, 8, generator=g, dtype=torch.float64), torch.arange(n) % 3


def test_cross_entropy_uniform_logits_is_log_c():
    loss = cross_entropy(torch.zeros(1, 10), torch.tensor([3]))
    assert abs(float(loss) - math.log(10)) < 1e-6


def test_cross_entropy_large_margin_near_zero():
    logits = torch.tensor([[50.0, 0.0, 0.0]])
    assert float(cross_entropy(logits, torch.tensor([0]))) < 1e-6


def test_cross_entropy_mixed_batch_hand_value():
    rows = [[1.0, 2.0, 0.5], [0.1, -1.0, 3.0]]
    labels = [1, 2]
    want = sum(-r[y] + math.log(sum(math.exp(v) for v in r)) for r, y in zip(rows, labels)) / 2
    got = cross_entropy(torch.tensor(rows, dtype=torch.float64), torch.tensor(labels))
    assert abs(float(got) - want) < 1e-12


def test_cross_entropy_rejects_bad_labels_and_nan():
    with pytest.raises(InputDomainError):
        cross_entropy(torch.zeros(2, 3), torch.tensor([0, 3]))
    with pytest.raises(NumericError):
        cross_entropy(torch.tensor([[float("nan"), 0.0]]), torch.tensor([0]))


def test_grad_inner_matches_finite_differences(tiny_spec, fd, rel_err):
    x, y = _mlp_batch()
    theta = init_params(tiny_spec, 1, torch.float64)
    g = grad_inner(tiny_spec, theta, x, y)
    num = fd(lambda th: cross_entropy(forward(tiny_spec, th, x), y), theta)
    assert rel_err(g, num) <= 1e-6


def test_grad_inner_zero_at_stationary_point(tiny_spec):
    theta = torch.zeros(tiny_spec.layout.size)
    x = torch.ones(3, 8).mul_(0.7)
    g = grad_inner(tiny_spec, theta, x, torch.tensor([0, 1, 2]))
    assert float(g.norm()) < 1e-6


def test_grad_inner_duplicated_example_same_gradient(tiny_spec):
    x, y = _mlp_batch(n=1)
    theta = init_params(tiny_spec, 2, torch.float64)
    one = grad_inner(tiny_spec, theta, x, y)
    two = grad_inner(tiny_spec, theta, torch.cat([x, x]), torch.cat([y, y]))
    assert torch.allclose(one, two, rtol=0, atol=1e-12)


def test_grad_inner_rejects_wrong_length(tiny_spec):
    x, y = _mlp_batch()
    with pytest.raises(StructuralError):
        grad_inner(tiny_spec, torch.zeros(tiny_spec.layout.size - 1, dtype=torch.float64), x, y)


def test_hvp_quadratic_exact():
    g = torch.Generator().manual_seed(0)
    m = torch.randn(5, 5, generator=g, dtype=torch.float64)
    a = m @ m.T + torch.eye(5, dtype=torch.float64)
    theta = torch.randn(5, generator=g, dtype=torch.float64)
    v = torch.randn(5, generator=g, dtype=torch.float64)
    hv = hvp_of(lambda th: 0.5 * th @ (a @ th), theta, v)
    assert torch.allclose(hv, a @ v, rtol=0, atol=1e-12)


def test_hvp_linear_loss_is_zero():
    c = torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64)
    hv = hvp_of(lambda th: th @ c, torch.zeros(3, dtype=torch.float64), torch.ones(3, dtype=torch.float64))
    assert torch.equal(hv, torch.zeros(3, dtype=torch.float64))


def test_hvp_matches_gradient_differences(tiny_spec, rel_err):
    x, y = _mlp_batch()
    theta = init_params(tiny_spec, 3, torch.float64)
    v = torch.randn(theta.numel(), generator=torch.Generator().manual_seed(4), dtype=torch.float64)
    h = 1e-5
    num = (grad_inner(tiny_spec, theta + h * v, x, y) - grad_inner(tiny_spec, theta - h * v, x, y)) / (2 * h)
    assert rel_err(hvp(tiny_spec, theta, x, y, v), num) <= 1e-4


def test_hvp_is_linear_in_v(tiny_spec, rel_err):
    x, y = _mlp_batch()
    theta = init_params(tiny_spec, 5, torch.float64)
    g = torch.Generator().manual_seed(6)
    u = torch.randn(theta.numel(), generator=g, dtype=torch.float64)
    v = torch.randn(theta.numel(), generator=g, dtype=torch.float64)
    lhs = hvp(tiny_spec, theta, x, y, 2.5 * u - 0.75 * v)
    rhs = 2.5 * hvp(tiny_spec, theta, x, y, u) - 0.75 * hvp(tiny_spec, theta, x, y, v)
    assert rel_err(lhs, rhs) <= 1e-10


def test_backprop_zero_steps_is_zero():
    loss = lambda th, x, b: (th * x.sum()).sum()
    meta = backprop_through_training(loss, torch.ones(4, dtype=torch.float64), 0.1,
                                     torch.ones(2, 3, dtype=torch.float64), [], torch.ones(4, dtype=torch.float64))
    assert torch.equal(meta.d_images, torch.zeros(2, 3, dtype=torch.float64)) and meta.d_alpha == 0.0


def test_backprop_one_step_quadratic_closed_form():
    # l = 0.5 th.A.th - th.x  =>  g = A th - x, dg/dx = -I
    g = torch.Generator().manual_seed(1)
    m = torch.randn(5, 5, generator=g, dtype=torch.float64)
    a = m @ m.T
    theta0 = torch.randn(5, generator=g, dtype=torch.float64)
    x = torch.randn(1, 5, generator=g, dtype=torch.float64)
    up = torch.randn(5, generator=g, dtype=torch.float64)
    alpha = 0.3
    loss = lambda th, imgs, b: 0.5 * th @ (a @ th) - th @ imgs.reshape(-1)
    meta = backprop_through_training(loss, theta0, alpha, x, [InnerBatch(np.arange(1))], up)
    g0 = a @ theta0 - x.reshape(-1)
    assert abs(meta.d_alpha - float(-(up @ g0))) < 1e-12
    assert torch.allclose(meta.d_images.reshape(-1), alpha * up, rtol=0, atol=1e-12)


def test_backprop_zero_alpha_invariant(tiny_spec):
    x, _ = _mlp_batch(n=3)
    labels = torch.tensor([0, 1, 2])
    theta0 = init_params(tiny_spec, 7, torch.float64)
    up = torch.randn(theta0.numel(), generator=torch.Generator().manual_seed(8), dtype=torch.float64)
    batches = [InnerBatch(np.arange(3))] * 3
    loss = network_loss(tiny_spec, labels)
    meta = backprop_through_training(loss, theta0, 0.0, x, batches, up)
    g0 = grad_of(lambda th: loss(th, x, batches[0]), theta0)
    assert bool((meta.d_images == 0).all())
    assert abs(meta.d_alpha - float(-3 * (up @ g0))) < 1e-10


def test_backprop_three_steps_matches_finite_differences(tiny_spec, fd, rel_err):
    x, _ = _mlp_batch(seed=9, n=3)
    labels = torch.tensor([0, 1, 2])
    theta0 = init_params(tiny_spec, 11, torch.float64)
    target = theta0 + 0.1 * torch.randn(theta0.numel(), generator=torch.Generator().manual_seed(12),
                                        dtype=torch.float64)
    batches = [InnerBatch(np.arange(3))] * 3
    loss = network_loss(tiny_spec, labels)
    alpha = 0.2
    denom = float(((theta0 - target) ** 2).sum())

    def f(imgs, a=alpha):
        final = unroll(loss, theta0, a, imgs, batches).final
        return ((final - target) ** 2).sum() / denom

    final = unroll(loss, theta0, alpha, x, batches).final
    meta = backprop_through_training(loss, theta0, alpha, x, batches, 2 * (final - target) / denom)
    assert rel_err(meta.d_images, fd(f, x)) <= 1e-4
    h = 1e-6
    num_alpha = (float(f(x, alpha + h)) - float(f(x, alpha - h))) / (2 * h)
    assert abs(meta.d_alpha - num_alpha) <= 1e-4 * max(abs(num_alpha), 1e-12)


def test_unroll_rejects_non_finite_gradient():
    loss = lambda th, x, b: (th * float("nan")).sum()
    with pytest.raises(NumericError):
        unroll(loss, torch.ones(3), 0.1, torch.ones(1, 3), [InnerBatch(np.arange(1))])
