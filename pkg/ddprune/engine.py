# ddprune/engine.py
"""
Differentiable numerics core.

Parameters travel as flat 1-D tensors (see models.ParamLayout). Inner training is
plain SGD, theta_{j+1} = theta_j - alpha * grad_j, and its meta-gradient is the
exact reverse recursion

    d_theta_j  = d_theta_{j+1} - alpha * H_j d_theta_{j+1}
    d_alpha   -= d_theta_{j+1} . g_j
    d_images  -= alpha * (dg_j/dimages)^T d_theta_{j+1}

with H_j v and the mixed term obtained by reverse-over-reverse autograd.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import augment as aug
from .errors import InputDomainError, NumericError, StructuralError
from .models import ArchSpec, forward

# (theta, images, batch) -> scalar loss
LossFn = Callable[[torch.Tensor, torch.Tensor, "InnerBatch"], torch.Tensor]


@dataclass(frozen=True)
class InnerBatch:
    """One inner minibatch b_{i,j}: rows of the distilled block plus its augmentation draw."""
    indices: np.ndarray
    augment: Optional[aug.AugmentParams] = None


@dataclass
class MetaGradients:
    d_images: torch.Tensor
    d_alpha: float


@dataclass
class UnrollTrace:
    """Forward states theta_0..theta_J and the gradients g_0..g_{J-1} between them."""
    states: List[torch.Tensor]
    grads: List[torch.Tensor] = field(default_factory=list)
    batches: List[InnerBatch] = field(default_factory=list)

    @property
    def final(self) -> torch.Tensor:
        return self.states[-1]

    @property
    def steps(self) -> int:
        return len(self.states) - 1


def _require_finite(t: torch.Tensor, what: str, step: int | None = None) -> None:
    if not bool(torch.isfinite(t).all()):
        raise NumericError(f"{what}: non-finite values", step=step)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise StructuralError(f"cross_entropy: expected logits [B x C] with B >= 1, got {tuple(logits.shape)}")
    if labels.shape != (logits.shape[0],):
        raise StructuralError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {logits.shape[0]} rows")
    n_cls = logits.shape[1]
    if bool(((labels < 0) | (labels >= n_cls)).any()):
        raise InputDomainError(f"cross_entropy: labels must lie in [0, {n_cls})")
    _require_finite(logits.detach(), "cross_entropy")
    return F.cross_entropy(logits, labels.long())


def _check_params(spec: ArchSpec, params: torch.Tensor, where: str) -> None:
    p = spec.layout.size
    if params.ndim != 1 or params.numel() != p:
        raise StructuralError(f"{where}: expected {p} parameters for {spec}, got shape {tuple(params.shape)}")


def grad_of(loss: Callable[[torch.Tensor], torch.Tensor], params: torch.Tensor,
            create_graph: bool = False) -> torch.Tensor:
    theta = params.detach().requires_grad_(True)
    with torch.enable_grad():
        out = loss(theta)
        if not out.requires_grad:
            return torch.zeros_like(theta)
        (g,) = torch.autograd.grad(out, theta, create_graph=create_graph, allow_unused=True)
    return torch.zeros_like(theta) if g is None else g


def hvp_of(loss: Callable[[torch.Tensor], torch.Tensor], params: torch.Tensor,
           v: torch.Tensor) -> torch.Tensor:
    """H v of `loss` at `params` by differentiating the gradient (reverse over reverse)."""
    if v.shape != params.shape:
        raise StructuralError(f"hvp: vector of shape {tuple(v.shape)} for parameters of shape {tuple(params.shape)}")
    theta = params.detach().requires_grad_(True)
    with torch.enable_grad():
        out = loss(theta)
        if not out.requires_grad:
            return torch.zeros_like(theta)
        (g,) = torch.autograd.grad(out, theta, create_graph=True, allow_unused=True)
        if g is None or not g.requires_grad:
            return torch.zeros_like(theta)
        (hv,) = torch.autograd.grad(g, theta, grad_outputs=v.detach(), allow_unused=True)
    return torch.zeros_like(theta) if hv is None else hv


def grad_inner(spec: ArchSpec, params: torch.Tensor, images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Exact gradient of the batch cross-entropy w.r.t. the flat parameters."""
    _check_params(spec, params, "grad_inner")
    return grad_of(lambda th: cross_entropy(forward(spec, th, images), labels), params)


def hvp(spec: ArchSpec, params: torch.Tensor, images: torch.Tensor, labels: torch.Tensor,
        v: torch.Tensor) -> torch.Tensor:
    _check_params(spec, params, "hvp")
    return hvp_of(lambda th: cross_entropy(forward(spec, th, images), labels), params, v)


def network_loss(spec: ArchSpec, labels: torch.Tensor) -> LossFn:
    """Inner loss l(A(b); theta) of a network on one distilled minibatch."""

    def loss(theta: torch.Tensor, images: torch.Tensor, batch: InnerBatch) -> torch.Tensor:
        idx = torch.as_tensor(batch.indices, dtype=torch.long)
        x = images.index_select(0, idx)
        if batch.augment is not None:
            x = aug.apply(batch.augment, x)
        return cross_entropy(forward(spec, theta, x), labels.index_select(0, idx))

    return loss


def unroll(loss_fn: LossFn, theta0: torch.Tensor, alpha: float, images: torch.Tensor,
           batches: Sequence[InnerBatch]) -> UnrollTrace:
    """J plain-SGD steps from theta0; every state is retained for the reverse pass."""
    x = images.detach()
    trace = UnrollTrace(states=[theta0.detach().clone()])
    for j, batch in enumerate(batches):
        theta = trace.states[-1]
        g = grad_of(lambda th: loss_fn(th, x, batch), theta)
        _require_finite(g, "unroll: gradient", step=j)
        nxt = theta - alpha * g
        _require_finite(nxt, "unroll: parameters", step=j)
        trace.grads.append(g)
        trace.batches.append(batch)
        trace.states.append(nxt)
    return trace


def backprop_through_training(loss_fn: LossFn, theta0: torch.Tensor, alpha: float,
                              images: torch.Tensor, batches: Sequence[InnerBatch],
                              upstream: torch.Tensor,
                              states: Optional[Sequence[torch.Tensor]] = None) -> MetaGradients:
    """
    Reverse accumulation through the J inner updates.

    `upstream` is dL/d theta_J. `states` are theta_0..theta_J from the forward
    unroll; they are recomputed when omitted.
    """
    if upstream.shape != theta0.shape:
        raise StructuralError(f"backprop_through_training: upstream shape {tuple(upstream.shape)} "
                              f"does not match parameters {tuple(theta0.shape)}")
    if states is None:
        states = unroll(loss_fn, theta0, alpha, images, batches).states
    if len(states) != len(batches) + 1:
        raise StructuralError(f"backprop_through_training: {len(states)} states for {len(batches)} updates")

    d_theta = upstream.detach().clone()
    d_images = torch.zeros_like(images, dtype=images.dtype)
    d_alpha = torch.zeros((), dtype=theta0.dtype)

    for j in reversed(range(len(batches))):
        theta = states[j].detach().requires_grad_(True)
        x = images.detach().requires_grad_(True)
        with torch.enable_grad():
            out = loss_fn(theta, x, batches[j])
            (g,) = torch.autograd.grad(out, theta, create_graph=True, allow_unused=True)
            if g is None:
                g = torch.zeros_like(theta)
            d_alpha = d_alpha - torch.dot(g.detach(), d_theta)
            if g.requires_grad:
                hv, gx = torch.autograd.grad(g, (theta, x), grad_outputs=d_theta, allow_unused=True)
            else:
                hv, gx = None, None
        if hv is not None:
            d_theta = d_theta - alpha * hv
        if gx is not None:
            d_images = d_images - alpha * gx
        _require_finite(d_theta, "backprop_through_training: parameter adjoint", step=j)
        _require_finite(d_images, "backprop_through_training: image adjoint", step=j)

    d_alpha_val = float(d_alpha)
    if not np.isfinite(d_alpha_val):
        raise NumericError("backprop_through_training: non-finite learning-rate gradient")
    return MetaGradients(d_images=d_images, d_alpha=d_alpha_val)
