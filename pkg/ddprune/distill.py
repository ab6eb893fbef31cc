# ddprune/distill.py
"""
The distillation loop: sample a teacher start, unroll the student J steps on the
distilled set, prune difficult-to-match parameters, score the normalized
matching loss and update pixels and alpha by momentum SGD.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field

from . import augment as aug
from . import codec, streams
from .data import DistilledDataset, LabeledDataset, Provenance, init_distilled
from .engine import (InnerBatch, LossFn, UnrollTrace, backprop_through_training, network_loss, unroll)
from .errors import ConfigError, DegenerateMaskError, NumericError, StructuralError
from .models import ArchSpec
from .pruning import DEFAULT_EPSILON, DEFAULT_FLOOR, PruneMask, apply_mask, compute_mask
from .teacher import StartSample, TrajectoryBuffer, check_start_bounds, sample_start

logger = logging.getLogger(__name__)

DENOM_GUARD = 1e-12
MIN_ALPHA = 1e-7
SMOOTHING_WINDOW = 50


class DistillConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    steps: int = Field(default=1000, ge=0)                # T
    student_steps: int = Field(default=20, ge=1)          # J
    teacher_epochs: int = Field(default=2, ge=1)          # K
    max_start_epoch: int = Field(default=10, ge=1)        # I+
    epsilon: float = Field(default=DEFAULT_EPSILON, ge=0, lt=1)
    prune: bool = True
    prune_floor: float = Field(default=DEFAULT_FLOOR, ge=0, le=1)
    alpha0: float = Field(default=0.01, gt=0)
    lr_images: float = Field(default=0.1, ge=0)
    lr_alpha: float = Field(default=1e-4, ge=0)
    momentum: float = Field(default=0.5, ge=0, lt=1)
    batch_size: int = Field(default=256, ge=1)
    ipc: int = Field(default=1, ge=1)
    seed: int = 0
    augment: aug.AugmentConfig = Field(default_factory=aug.AugmentConfig)
    dtype: Literal["float32", "float64"] = "float32"
    log_every: int = Field(default=50, ge=1)

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def digest(self) -> str:
        return codec.digest(self.model_dump_json())


@dataclass
class StepRecord:
    t: int
    loss: float
    u: int
    p: int
    floor_triggered: bool
    alpha: float


@dataclass
class RunReport:
    records: List[StepRecord] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(r.t, r.loss, r.u, r.p, int(r.floor_triggered), r.alpha) for r in self.records],
            columns=["t", "L", "u", "p", "floor_triggered", "alpha"],
        )

    def to_csv(self, path: str | Path) -> Path:
        return codec.atomic_write_text(path, self.to_frame().to_csv(index=False, float_format="%.9g"))

    def smoothed_loss(self, window: int = SMOOTHING_WINDOW) -> pd.Series:
        return self.to_frame()["L"].rolling(window, min_periods=1).mean()


@dataclass
class DistillState:
    """Single-owner loop state: the distilled set, its learnable leaves and the meta-optimizer."""

    distilled: DistilledDataset
    images: torch.Tensor
    alpha: torch.Tensor
    optimizer: torch.optim.SGD
    t: int = 0
    loss_history: List[float] = field(default_factory=list)
    mask_history: List[Tuple[int, int, bool]] = field(default_factory=list)
    alpha_history: List[float] = field(default_factory=list)

    @classmethod
    def create(cls, distilled: DistilledDataset, config: DistillConfig) -> "DistillState":
        images = distilled.images.detach().clone().to(config.torch_dtype).requires_grad_(True)
        alpha = distilled.alpha.detach().clone().to(config.torch_dtype).requires_grad_(True)
        opt = torch.optim.SGD([{"params": [images], "lr": config.lr_images},
                               {"params": [alpha], "lr": config.lr_alpha}],
                              lr=config.lr_images, momentum=config.momentum)
        return cls(distilled=distilled, images=images, alpha=alpha, optimizer=opt)

    def velocity(self, which: str) -> Optional[torch.Tensor]:
        leaf = self.images if which == "images" else self.alpha
        return self.optimizer.state.get(leaf, {}).get("momentum_buffer")

    def snapshot(self) -> DistilledDataset:
        """Current distilled set as a detached DistilledDataset."""
        out = self.distilled.clone()
        out.images = self.images.detach().clone()
        out.alpha = self.alpha.detach().clone()
        out.provenance = Provenance(self.distilled.provenance.config_hash, self.t, self.distilled.provenance.arch)
        return out


# --------------------------
# Pieces of one step
# --------------------------

def sample_batches(n_images: int, image_shape: Tuple[int, ...], count: int, batch_size: int,
                   augment_cfg: aug.AugmentConfig, rng: np.random.Generator) -> List[InnerBatch]:
    """b_{i,j} for j < count: the whole set when it fits a batch, else a uniform subsample."""
    out = []
    for _ in range(count):
        if n_images <= batch_size:
            idx = np.arange(n_images)
        else:
            idx = np.sort(rng.choice(n_images, size=batch_size, replace=False))
        out.append(InnerBatch(indices=idx, augment=aug.sample_params(augment_cfg, rng, image_shape)))
    return out


def student_unroll(spec: ArchSpec, theta_i: torch.Tensor, distilled: DistilledDataset, J: int,
                   rng: np.random.Generator, *, batch_size: int = 256,
                   augment_cfg: aug.AugmentConfig | None = None, loss_fn: LossFn | None = None,
                   images: torch.Tensor | None = None) -> Tuple[torch.Tensor, UnrollTrace]:
    """theta~_{i,0} = theta_i, then J SGD steps with the distilled set's own alpha."""
    if theta_i.ndim != 1 or theta_i.numel() != spec.layout.size:
        raise StructuralError(f"student_unroll: start vector of {theta_i.numel()} for {spec.layout.size} parameters")
    if len(distilled) == 0:
        raise StructuralError("student_unroll: empty distilled set")
    images = distilled.images if images is None else images
    batches = sample_batches(len(distilled), distilled.image_shape, J, batch_size,
                             augment_cfg or aug.AugmentConfig(flip=False, shift=False), rng)
    loss_fn = loss_fn or network_loss(spec, distilled.labels)
    trace = unroll(loss_fn, theta_i.to(images.dtype), float(distilled.alpha), images, batches)
    return trace.final, trace


def _sqdist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.sum((a - b) ** 2)


def matching_loss(student: torch.Tensor, target: torch.Tensor, start: torch.Tensor,
                  guard: float = DENOM_GUARD) -> torch.Tensor:
    """||student - target||^2 / max(||start - target||^2, guard) over the kept parameters."""
    if not (student.shape == target.shape == start.shape) or student.ndim != 1:
        raise StructuralError(f"matching_loss: lengths {student.numel()}, {target.numel()}, {start.numel()} differ")
    if student.numel() == 0:
        raise DegenerateMaskError("matching_loss: no parameters left after pruning")
    denom = torch.clamp(_sqdist(start.detach(), target.detach()), min=guard)
    return _sqdist(student, target.detach()) / denom


def _mask_for(config: DistillConfig, student: torch.Tensor, target: torch.Tensor) -> PruneMask:
    if not config.prune:
        return PruneMask.all_keep(student.numel())
    return compute_mask(student, target, config.epsilon, config.prune_floor)


def _draw(state: DistillState, buffer: TrajectoryBuffer, config: DistillConfig,
          rng: np.random.Generator) -> Tuple[StartSample, List[InnerBatch]]:
    sample = sample_start(buffer, config.max_start_epoch, config.teacher_epochs, rng, config.torch_dtype)
    batches = sample_batches(len(state.distilled), state.distilled.image_shape, config.student_steps,
                             config.batch_size, config.augment, rng)
    return sample, batches


def _forward_loss(state: DistillState, spec: ArchSpec, config: DistillConfig, sample: StartSample,
                  batches: Sequence[InnerBatch]):
    loss_fn = network_loss(spec, state.distilled.labels)
    alpha = float(state.alpha.detach())
    trace = unroll(loss_fn, sample.start, alpha, state.images, batches)
    mask = _mask_for(config, trace.final, sample.target)
    theta_j = trace.final.detach().requires_grad_(True)
    with torch.enable_grad():
        loss = matching_loss(apply_mask(mask, theta_j), apply_mask(mask, sample.target),
                             apply_mask(mask, sample.start))
        (upstream,) = torch.autograd.grad(loss, theta_j)
    return loss_fn, alpha, trace, mask, loss.detach(), upstream


def evaluate_matching_loss(state: DistillState, buffer: TrajectoryBuffer, config: DistillConfig,
                           rng: np.random.Generator) -> float:
    """Matching loss for the draws `rng` produces, without touching the state."""
    sample, batches = _draw(state, buffer, config, rng)
    return float(_forward_loss(state, buffer.spec, config, sample, batches)[4])


def distill_step(state: DistillState, buffer: TrajectoryBuffer, config: DistillConfig,
                 rng: np.random.Generator) -> DistillState:
    t = state.t
    sample, batches = _draw(state, buffer, config, rng)
    try:
        loss_fn, alpha, trace, mask, loss, upstream = _forward_loss(state, buffer.spec, config, sample, batches)
        meta = None
        if torch.isfinite(loss):
            meta = backprop_through_training(loss_fn, sample.start, alpha, state.images, batches, upstream,
                                             states=trace.states)
    except NumericError as exc:
        raise type(exc)(f"distill_step {t}: {exc}", step=t) from exc
    if meta is None:
        raise NumericError("distill_step: matching loss is not finite", step=t)

    state.optimizer.zero_grad(set_to_none=True)
    state.images.grad = meta.d_images.to(state.images.dtype)
    state.alpha.grad = torch.tensor(meta.d_alpha, dtype=state.alpha.dtype)
    state.optimizer.step()
    with torch.no_grad():
        state.alpha.clamp_(min=MIN_ALPHA)

    state.t += 1
    state.loss_history.append(float(loss))
    state.mask_history.append((mask.u, mask.p, mask.floor_triggered))
    state.alpha_history.append(float(state.alpha.detach()))
    msg = ("step %d: L=%.6f u=%d/%d floor=%s alpha=%.6g teacher=%d start=%d",
           t, float(loss), mask.u, mask.p, mask.floor_triggered, state.alpha_history[-1],
           sample.teacher, sample.epoch)
    if t % config.log_every == 0 or mask.floor_triggered:
        logger.info(*msg)
    else:
        logger.debug(*msg)
    return state


# --------------------------
# Full run
# --------------------------

def validate_run(dataset: LabeledDataset, buffer: TrajectoryBuffer, config: DistillConfig) -> ArchSpec:
    """Startup checks; everything that can fail before step 0 fails here."""
    spec = buffer.spec
    if not spec.is_bound:
        raise ConfigError(f"distill: buffer architecture {buffer.arch} lacks input geometry")
    if spec.input_shape != dataset.image_shape or spec.num_classes != dataset.num_classes:
        raise ConfigError(f"distill: buffer architecture {buffer.arch} does not match dataset images "
                          f"{dataset.image_shape} with {dataset.num_classes} classes")
    if spec.layout.size != buffer.num_params:
        raise ConfigError(f"distill: buffer holds {buffer.num_params} parameters, {spec} has {spec.layout.size}")
    try:
        check_start_bounds(buffer.epochs, config.max_start_epoch, config.teacher_epochs)
    except ConfigError as exc:
        raise ConfigError(f"distill: {exc}") from None
    config.augment.validate_for(dataset.image_shape)
    counts = dataset.class_counts()
    if int(counts.min()) < config.ipc:
        raise ConfigError(f"distill: ipc={config.ipc} but the smallest class has {int(counts.min())} examples")
    if config.student_steps >= config.teacher_epochs:
        logger.warning("distill: J=%d student steps is not much smaller than K=%d teacher epochs",
                       config.student_steps, config.teacher_epochs)
    return spec


def run(dataset: LabeledDataset, buffer: TrajectoryBuffer,
        config: DistillConfig) -> Tuple[DistilledDataset, RunReport]:
    validate_run(dataset, buffer, config)
    distilled = init_distilled(dataset, config.ipc, config.alpha0, config.seed)
    distilled.images = distilled.images.to(config.torch_dtype)
    distilled.alpha = distilled.alpha.to(config.torch_dtype)
    distilled.provenance = Provenance(config_hash=codec.digest(config.digest(), buffer.digest, dataset.digest()),
                                      steps=0, arch=buffer.arch)
    state = DistillState.create(distilled, config)
    logger.info("distill: T=%d J=%d K=%d I+=%d eps=%s prune=%s floor=%s ipc=%d p=%d",
                config.steps, config.student_steps, config.teacher_epochs, config.max_start_epoch,
                config.epsilon, config.prune, config.prune_floor, config.ipc, buffer.num_params)

    for t in range(config.steps):
        distill_step(state, buffer, config, streams.generator(config.seed, f"distill.step.{t}"))

    report = RunReport([StepRecord(t, state.loss_history[t], u, p, floor, state.alpha_history[t])
                        for t, (u, p, floor) in enumerate(state.mask_history)])
    return state.snapshot(), report
