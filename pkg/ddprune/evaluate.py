# ddprune/evaluate.py
"""
Train fresh networks from scratch on distilled (or selected) data and report
five-seed accuracy, including cross-architecture rows and the random-selection
and full-dataset comparators.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field

from . import augment as aug
from . import codec, streams
from .data import DistilledDataset, LabeledDataset, select_per_class
from .engine import cross_entropy
from .errors import ConfigError, InputDomainError, NumericError, StructuralError
from .models import ArchSpec, forward, init_params
from .teacher import accuracy

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2, 3, 4)


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(default=100, ge=0)
    lr: float = Field(default=0.01, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    batch_size: int = Field(default=256, ge=1)
    seeds: Tuple[int, ...] = DEFAULT_SEEDS
    use_distilled_lr: bool = True
    eval_augment: bool = False
    augment: aug.AugmentConfig = Field(default_factory=aug.AugmentConfig)
    workers: int = Field(default=1, ge=1)


@dataclass
class ArchResult:
    arch: str
    lr: float
    seeds: Tuple[int, ...]
    accuracies: List[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        # unbiased (n-1) estimator over exactly the listed seeds
        return float(np.std(self.accuracies, ddof=1)) if len(self.accuracies) > 1 else 0.0


@dataclass
class EvalReport:
    method: str
    rows: List[ArchResult] = field(default_factory=list)
    digest: str = ""
    provenance: str = ""

    def row(self, arch: str) -> ArchResult:
        for r in self.rows:
            if r.arch == arch:
                return r
        raise KeyError(arch)


# --------------------------
# Training
# --------------------------

def train_from_scratch(spec: ArchSpec, trainset: LabeledDataset, lr: float, epochs: int, seed: int,
                       testset: Optional[LabeledDataset] = None, *, momentum: float = 0.9,
                       batch_size: int = 256, augment_cfg: Optional[aug.AugmentConfig] = None,
                       dtype: torch.dtype = torch.float32) -> Tuple[torch.Tensor, float]:
    """Momentum SGD from a fresh seeded init; returns final parameters and test accuracy."""
    if len(trainset) == 0:
        raise StructuralError("train_from_scratch: empty training set")
    spec = spec if spec.is_bound else spec.bind(trainset.image_shape, trainset.num_classes)
    params = init_params(spec, streams.derive_seed(seed, "eval.init"), dtype).requires_grad_(True)
    opt = torch.optim.SGD([params], lr=lr, momentum=momentum)
    rng = streams.generator(seed, "eval.shuffle")
    x_all = trainset.images.detach().to(dtype)
    n = len(trainset)
    for epoch in range(epochs):
        order = torch.as_tensor(rng.permutation(n), dtype=torch.long)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            x = x_all.index_select(0, idx)
            if augment_cfg is not None and augment_cfg.enabled:
                x = aug.apply(aug.sample_params(augment_cfg, rng, trainset.image_shape), x)
            loss = cross_entropy(forward(spec, params, x), trainset.labels.index_select(0, idx))
            opt.zero_grad()
            loss.backward()
            opt.step()
        if not bool(torch.isfinite(params).all()):
            raise NumericError(f"train_from_scratch: {spec.name} diverged at lr={lr}", epoch=epoch)
    final = params.detach()
    return final, accuracy(spec, final, testset if testset is not None else trainset)


def _check_seeds(seeds: Sequence[int]) -> Tuple[int, ...]:
    seeds = tuple(int(s) for s in seeds)
    if len(seeds) < 2:
        raise ConfigError(f"evaluate: need at least 2 seeds, got {len(seeds)}")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"evaluate: seeds must be distinct, got {list(seeds)}")
    return seeds


def _bind(spec: ArchSpec | str, image_shape: Tuple[int, ...], num_classes: int) -> ArchSpec:
    spec = ArchSpec.parse(spec) if isinstance(spec, str) else spec
    bound = spec.bind(image_shape, num_classes)
    try:
        bound.check()
    except StructuralError as exc:
        raise StructuralError(f"evaluate: architecture {spec.name} is incompatible with the data: {exc}") from None
    return bound


def _run_seeds(fn, seeds: Sequence[int], workers: int) -> List[float]:
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, seeds))
    return [fn(s) for s in seeds]


def _arch_result(spec: ArchSpec, trainsets, testset: LabeledDataset, lr: float, seeds: Tuple[int, ...],
                 cfg: EvalConfig, method: str) -> ArchResult:
    augment_cfg = cfg.augment if cfg.eval_augment else None

    def one(seed: int) -> float:
        train = trainsets(seed) if callable(trainsets) else trainsets
        _, acc = train_from_scratch(spec, train, lr, cfg.epochs, seed, testset, momentum=cfg.momentum,
                                    batch_size=cfg.batch_size, augment_cfg=augment_cfg)
        logger.info("%s %s seed %d: accuracy %.4f (lr=%.6g)", method, spec.name, seed, acc, lr)
        return acc

    return ArchResult(arch=spec.name, lr=float(lr), seeds=seeds, accuracies=_run_seeds(one, seeds, cfg.workers))


def _lr_for(spec: ArchSpec, distilled: DistilledDataset, cfg: EvalConfig) -> float:
    generator = ArchSpec.parse(distilled.provenance.arch).name if distilled.provenance.arch else None
    if cfg.use_distilled_lr and generator == spec.name:
        lr = float(distilled.alpha)
        logger.info("evaluate: %s is the generating architecture; training with learned lr %.6g", spec.name, lr)
    else:
        lr = cfg.lr
        logger.info("evaluate: %s trains with the fixed lr %.6g", spec.name, lr)
    return lr


# --------------------------
# Reports
# --------------------------

def evaluate_distilled(distilled: DistilledDataset, testset: LabeledDataset, spec: ArchSpec | str,
                       cfg: EvalConfig = EvalConfig(), seeds: Optional[Sequence[int]] = None) -> EvalReport:
    return cross_architecture_eval(distilled, testset, [spec], cfg, seeds)


def cross_architecture_eval(distilled: DistilledDataset, testset: LabeledDataset,
                            specs: Iterable[ArchSpec | str], cfg: EvalConfig = EvalConfig(),
                            seeds: Optional[Sequence[int]] = None) -> EvalReport:
    """One five-seed row per architecture; the distilled set itself is never modified."""
    seeds = _check_seeds(seeds if seeds is not None else cfg.seeds)
    bound = [_bind(s, distilled.image_shape, distilled.num_classes) for s in specs]
    before = distilled.digest()
    train = distilled.as_labeled()
    report = EvalReport(method="Distilled",
                        digest=codec.digest(before, cfg.model_dump_json(), ",".join(map(str, seeds))),
                        provenance=f"{distilled.provenance.arch} steps={distilled.provenance.steps} "
                                   f"config={distilled.provenance.config_hash}")
    for spec in bound:
        report.rows.append(_arch_result(spec, train, testset, _lr_for(spec, distilled, cfg), seeds, cfg, "distilled"))
    if distilled.digest() != before:
        raise StructuralError("evaluate: distilled dataset changed during evaluation")
    return report


def random_baseline(source: LabeledDataset, ipc: int, testset: LabeledDataset, specs: Iterable[ArchSpec | str],
                    cfg: EvalConfig = EvalConfig(), seeds: Optional[Sequence[int]] = None) -> EvalReport:
    """Per seed: a fresh uniform ipc-per-class selection of real examples, trained with the fixed lr."""
    if ipc < 1:
        raise InputDomainError(f"random_baseline: ipc must be >= 1, got {ipc}")
    seeds = _check_seeds(seeds if seeds is not None else cfg.seeds)
    specs = [specs] if isinstance(specs, (ArchSpec, str)) else list(specs)
    bound = [_bind(s, source.image_shape, source.num_classes) for s in specs]

    def selection(seed: int) -> LabeledDataset:
        idx = select_per_class(source.labels, source.num_classes, ipc, streams.generator(seed, "baseline.select"))
        return source.subset(idx)

    selection(seeds[0])  # fail fast on classes with fewer than ipc examples
    report = EvalReport(method="Random",
                        digest=codec.digest(source.digest(), str(ipc), cfg.model_dump_json(), ",".join(map(str, seeds))),
                        provenance=f"random ipc={ipc}")
    for spec in bound:
        report.rows.append(_arch_result(spec, selection, testset, cfg.lr, seeds, cfg, "random"))
    return report


def full_dataset(source: LabeledDataset, testset: LabeledDataset, specs: Iterable[ArchSpec | str],
                 cfg: EvalConfig = EvalConfig(), seeds: Optional[Sequence[int]] = None) -> EvalReport:
    seeds = _check_seeds(seeds if seeds is not None else cfg.seeds)
    specs = [specs] if isinstance(specs, (ArchSpec, str)) else list(specs)
    report = EvalReport(method="Full",
                        digest=codec.digest(source.digest(), cfg.model_dump_json(), ",".join(map(str, seeds))),
                        provenance=f"full n={len(source)}")
    for s in specs:
        spec = _bind(s, source.image_shape, source.num_classes)
        report.rows.append(_arch_result(spec, source, testset, cfg.lr, seeds, cfg, "full"))
    return report


def reports_frame(reports: Sequence[EvalReport]) -> pd.DataFrame:
    rows = []
    for rep in reports:
        for r in rep.rows:
            rows.append({
                "method": rep.method,
                "arch": r.arch,
                "lr": r.lr,
                "mean": r.mean,
                "std": r.std,
                "n_seeds": len(r.seeds),
                "per_seed": ";".join(f"{s}:{a:.6f}" for s, a in zip(r.seeds, r.accuracies)),
                "digest": rep.digest,
            })
    return pd.DataFrame(rows, columns=["method", "arch", "lr", "mean", "std", "n_seeds", "per_seed", "digest"])


def format_table(reports: Sequence[EvalReport]) -> str:
    """Aligned text: one row per method, one column per architecture, 'mean±std' accuracy in percent."""
    archs: List[str] = []
    for rep in reports:
        for r in rep.rows:
            if r.arch not in archs:
                archs.append(r.arch)
    cells = [["Method"] + archs]
    for rep in reports:
        line = [rep.method]
        for a in archs:
            try:
                r = rep.row(a)
                line.append(f"{100 * r.mean:.1f}±{100 * r.std:.1f}")
            except KeyError:
                line.append("-")
        cells.append(line)
    widths = [max(len(row[k]) for row in cells) for k in range(len(cells[0]))]
    n_seeds = max((len(r.seeds) for rep in reports for r in rep.rows), default=0)
    out = [f"# test accuracy (%), mean±std over {n_seeds} seeds; std uses the unbiased (n-1) estimator"]
    for i, row in enumerate(cells):
        out.append("  ".join(c.ljust(widths[k]) if k == 0 else c.rjust(widths[k]) for k, c in enumerate(row)).rstrip())
        if i == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def write_reports(reports: Sequence[EvalReport], csv_path: str | Path, table_path: str | Path) -> None:
    codec.atomic_write_text(csv_path, reports_frame(reports).to_csv(index=False, float_format="%.9g"))
    codec.atomic_write_text(table_path, format_table(reports))
