# ddprune/cli.py
"""
Command-line entry point.

    ddprune train-teachers --config run.ini [--seed N]
    ddprune distill        --config run.ini [--seed N]
    ddprune eval           --config run.ini [--seed N]
    ddprune export-images  --distilled FILE --out FILE.ppm [--zca FILE] [--autoscale]

Configuration is a flat INI file with [run], [data], [teacher], [distill] and
[eval] sections. DDPRUNE_OUTPUT_DIR overrides [run] output_dir. Exit codes:
0 success, 1 internal/numeric error, 2 usage/config error.
"""
from __future__ import annotations

import argparse
import configparser
import io
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import augment as aug
from . import codec
from . import data as dmod
from . import log as logmod
from .distill import DistillConfig, run as distill_run
from .errors import ConfigError, EXIT_OK, EXIT_USAGE, StructuralError, exit_code_for
from .evaluate import (EvalConfig, cross_architecture_eval, full_dataset, random_baseline, write_reports)
from .models import ArchSpec
from .teacher import TeacherConfig, load_buffer, save_buffer, train_teachers

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "DDPRUNE_OUTPUT_DIR"
BUFFER_FILE = "teachers.ddtb"
TEACHER_SUMMARY_FILE = "teachers_summary.csv"
ZCA_FILE = "zca.npz"
DISTILLED_FILE = "distilled.ddd"
DISTILL_REPORT_FILE = "distill_report.csv"
EVAL_CSV_FILE = "eval.csv"
EVAL_TABLE_FILE = "eval.txt"


def _split_list(v: Any) -> Any:
    if isinstance(v, str):
        return tuple(p.strip() for p in v.replace(";", ",").split(",") if p.strip())
    return v


def _split_shape(v: Any) -> Any:
    if isinstance(v, str):
        return tuple(int(p) for p in v.lower().replace(",", "x").split("x") if p.strip())
    return v


# --------------------------
# Config sections
# --------------------------

class RunSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    output_dir: str = "runs/default"
    log_level: Optional[str] = None


class DataSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    source: Literal["blobs", "raw", "csv"] = "blobs"
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    classes: int = Field(default=3, ge=2)
    per_class: int = Field(default=500, ge=1)
    test_per_class: int = Field(default=500, ge=1)
    image_shape: Tuple[int, ...] = (3, 16, 16)
    separation: float = Field(default=dmod.DEFAULT_SEPARATION, gt=0)
    noise: float = Field(default=dmod.DEFAULT_BLOB_NOISE, ge=0)
    zca: bool = True
    zca_lambda: float = Field(default=dmod.DEFAULT_ZCA_LAMBDA, gt=0)

    @field_validator("image_shape", mode="before")
    @classmethod
    def parse_shape(cls, v: Any) -> Any:
        return _split_shape(v)


class TeacherSection(TeacherConfig):
    arch: str = "convnet-d2-w16"
    buffer: Optional[str] = None

    def to_config(self) -> TeacherConfig:
        return TeacherConfig(**self.model_dump(exclude={"arch", "buffer"}))


class DistillSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps: int = Field(default=1000, ge=0)
    student_steps: int = Field(default=20, ge=1)
    teacher_epochs: int = Field(default=2, ge=1)
    max_start_epoch: int = Field(default=10, ge=1)
    epsilon: float = Field(default=0.1, ge=0, lt=1)
    prune: bool = True
    prune_floor: float = Field(default=0.5, ge=0, le=1)
    alpha0: float = Field(default=0.01, gt=0)
    lr_images: float = Field(default=0.1, ge=0)
    lr_alpha: float = Field(default=1e-4, ge=0)
    momentum: float = Field(default=0.5, ge=0, lt=1)
    batch_size: int = Field(default=256, ge=1)
    ipc: int = Field(default=1, ge=1)
    dtype: Literal["float32", "float64"] = "float32"
    log_every: int = Field(default=50, ge=1)
    augment_flip: bool = True
    augment_shift: bool = True
    augment_cutout: bool = False
    augment_shift_max: int = Field(default=2, ge=0)
    augment_cutout_size: int = Field(default=4, ge=1)
    buffer: Optional[str] = None
    output: Optional[str] = None

    def augment(self) -> aug.AugmentConfig:
        return aug.AugmentConfig(flip=self.augment_flip, shift=self.augment_shift, cutout=self.augment_cutout,
                                 shift_max=self.augment_shift_max, cutout_size=self.augment_cutout_size)

    def to_config(self, seed: int) -> DistillConfig:
        fields = self.model_dump(exclude={"buffer", "output"} | {k for k in type(self).model_fields if k.startswith("augment_")})
        return DistillConfig(seed=seed, augment=self.augment(), **fields)


class EvalSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    archs: Tuple[str, ...] = ()
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    epochs: int = Field(default=100, ge=0)
    lr: float = Field(default=0.01, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    batch_size: int = Field(default=256, ge=1)
    use_distilled_lr: bool = True
    eval_augment: bool = False
    baseline: bool = True
    baseline_ipc: Optional[int] = Field(default=None, ge=1)
    full_dataset: bool = False
    workers: int = Field(default=1, ge=1)
    distilled: Optional[str] = None

    @field_validator("archs", "seeds", mode="before")
    @classmethod
    def parse_lists(cls, v: Any) -> Any:
        return _split_list(v)

    def to_config(self, augment_cfg: aug.AugmentConfig) -> EvalConfig:
        return EvalConfig(epochs=self.epochs, lr=self.lr, momentum=self.momentum, batch_size=self.batch_size,
                          seeds=self.seeds, use_distilled_lr=self.use_distilled_lr,
                          eval_augment=self.eval_augment, augment=augment_cfg, workers=self.workers)


SECTIONS = {"run": RunSection, "data": DataSection, "teacher": TeacherSection,
            "distill": DistillSection, "eval": EvalSection}


@dataclass
class RunConfig:
    run: RunSection
    data: DataSection
    teacher: TeacherSection
    distill: DistillSection
    eval: EvalSection
    source: Path

    @property
    def output_dir(self) -> Path:
        return Path(os.getenv(OUTPUT_DIR_ENV) or self.run.output_dir)

    def path(self, configured: Optional[str], default_name: str) -> Path:
        if configured:
            p = Path(configured)
            return p if p.is_absolute() else self.output_dir / p
        return self.output_dir / default_name

    def resolved_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for name in SECTIONS:
            values = getattr(self, name).model_dump()
            cp[name] = {k: _ini_value(v) for k, v in values.items() if v is not None}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write_resolved(self, command: str) -> Path:
        return codec.atomic_write_text(self.output_dir / f"resolved-{command}.ini", self.resolved_text())


def _ini_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def load_config(path: str | Path, seed: Optional[int] = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    unknown = [s for s in cp.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"{path}: unknown sections {unknown}")
    parsed: Dict[str, BaseModel] = {}
    for name, model in SECTIONS.items():
        raw = dict(cp[name]) if cp.has_section(name) else {}
        try:
            parsed[name] = model(**raw)
        except ValidationError as exc:
            problems = "; ".join(f"{'.'.join(map(str, e['loc']))}: {e['msg']}" for e in exc.errors())
            raise ConfigError(f"{path} [{name}]: {problems}") from None
    if seed is not None:
        parsed["run"] = parsed["run"].model_copy(update={"seed": int(seed)})
    if parsed["run"].log_level:
        logging.getLogger().setLevel(parsed["run"].log_level.upper())
    return RunConfig(source=path, **parsed)


# --------------------------
# Data plumbing
# --------------------------

def load_data(cfg: RunConfig) -> Tuple[dmod.LabeledDataset, dmod.LabeledDataset, Optional[dmod.ZCAStats]]:
    d = cfg.data
    if d.source == "blobs":
        train = dmod.make_blobs(d.classes, d.per_class, d.image_shape, d.separation, cfg.run.seed, "train", d.noise)
        test = dmod.make_blobs(d.classes, d.test_per_class, d.image_shape, d.separation, cfg.run.seed, "test", d.noise)
    else:
        if not d.train_path or not d.test_path:
            raise ConfigError(f"[data] source={d.source} needs train_path and test_path")
        fmt = "raw" if d.source == "raw" else "csv"
        shape = d.image_shape if d.source == "csv" else None
        train = dmod.load_dataset(d.train_path, fmt, shape, d.classes, "train")
        test = dmod.load_dataset(d.test_path, fmt, shape, d.classes, "test")
    stats = None
    if d.zca:
        stats = dmod.zca_fit(train, d.zca_lambda)
        train, test = dmod.whiten(train, stats), dmod.whiten(test, stats)
    return train, test, stats


# --------------------------
# Commands
# --------------------------

def configured_arch(cfg: RunConfig, train: dmod.LabeledDataset) -> ArchSpec:
    try:
        return ArchSpec.parse(cfg.teacher.arch).bind(train.image_shape, train.num_classes)
    except StructuralError as exc:
        raise ConfigError(f"[teacher] arch: {exc}") from None


def cmd_train_teachers(config_path: str | Path, seed: Optional[int] = None) -> Path:
    cfg = load_config(config_path, seed)
    train, _, stats = load_data(cfg)
    spec = configured_arch(cfg, train)
    buf = train_teachers(train, spec, cfg.teacher.to_config(), root_seed=cfg.run.seed)
    out = cfg.output_dir
    buffer_path = save_buffer(buf, cfg.path(cfg.teacher.buffer, BUFFER_FILE))
    if stats is not None:
        dmod.save_zca(stats, out / ZCA_FILE)
    summary = pd.DataFrame({"teacher": range(buf.num_teachers), "seed": list(buf.seeds),
                            "final_train_accuracy": buf.train_accuracy})
    codec.atomic_write_text(out / TEACHER_SUMMARY_FILE, summary.to_csv(index=False, float_format="%.6f"))
    cfg.write_resolved("train-teachers")
    print(f"[train-teachers] wrote {buffer_path} teachers: {buf.num_teachers} epochs: {buf.epochs} p: {buf.num_params}")
    return buffer_path


def cmd_distill(config_path: str | Path, seed: Optional[int] = None) -> Path:
    cfg = load_config(config_path, seed)
    dcfg = cfg.distill.to_config(cfg.run.seed)
    train, _, _ = load_data(cfg)
    buffer_path = cfg.path(cfg.distill.buffer or cfg.teacher.buffer, BUFFER_FILE)
    spec = configured_arch(cfg, train)
    buf = load_buffer(buffer_path)
    if str(buf.spec) != str(spec):
        raise ConfigError(f"distill: [teacher] arch is {spec} but {buffer_path} was trained for {buf.arch}")
    distilled, report = distill_run(train, buf, dcfg)
    out_path = dmod.save_distilled(distilled, cfg.path(cfg.distill.output, DISTILLED_FILE))
    report.to_csv(cfg.output_dir / DISTILL_REPORT_FILE)
    cfg.write_resolved("distill")
    final = report.records[-1] if report.records else None
    print(f"[distill] wrote {out_path} steps: {len(report.records)} "
          f"alpha: {float(distilled.alpha):.6g}" + (f" final L: {final.loss:.6f}" if final else ""))
    return out_path


def cmd_eval(config_path: str | Path, seed: Optional[int] = None) -> Path:
    cfg = load_config(config_path, seed)
    train, test, _ = load_data(cfg)
    distilled = dmod.load_distilled(cfg.path(cfg.eval.distilled or cfg.distill.output, DISTILLED_FILE))
    archs = list(cfg.eval.archs) or [ArchSpec.parse(distilled.provenance.arch or cfg.teacher.arch).name]
    ecfg = cfg.eval.to_config(cfg.distill.augment())
    reports = [cross_architecture_eval(distilled, test, archs, ecfg)]
    if cfg.eval.baseline:
        reports.append(random_baseline(train, cfg.eval.baseline_ipc or distilled.ipc, test, archs, ecfg))
    if cfg.eval.full_dataset:
        reports.append(full_dataset(train, test, archs, ecfg))
    out = cfg.output_dir
    write_reports(reports, out / EVAL_CSV_FILE, out / EVAL_TABLE_FILE)
    cfg.write_resolved("eval")
    print(f"[eval] wrote {out / EVAL_CSV_FILE} and {out / EVAL_TABLE_FILE} rows: "
          f"{sum(len(r.rows) for r in reports)}")
    return out / EVAL_TABLE_FILE


def to_pixels(images: torch.Tensor, autoscale: bool = False) -> np.ndarray:
    """Float images [N x C x H x W] -> uint8, x*255 rounded and clamped to [0, 255]."""
    x = images.detach().double().numpy()
    if autoscale:
        lo = x.min(axis=(1, 2, 3), keepdims=True)
        hi = x.max(axis=(1, 2, 3), keepdims=True)
        x = (x - lo) / np.where(hi > lo, hi - lo, 1.0)
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def image_grid(distilled: dmod.DistilledDataset, stats: Optional[dmod.ZCAStats] = None,
               autoscale: bool = False) -> np.ndarray:
    """H*classes x W*ipc x C grid; row = class, column = image within the class."""
    if len(distilled.image_shape) != 3 or distilled.image_shape[0] not in (1, 3):
        raise StructuralError(f"export-images: need 1- or 3-channel CxHxW images, got {distilled.image_shape}")
    images = distilled.images.detach()
    if stats is not None:
        images = dmod.zca_unapply(stats, images)
    pix = to_pixels(images, autoscale)
    c, h, w = distilled.image_shape
    grid = np.zeros((distilled.num_classes * h, distilled.ipc * w, c), dtype=np.uint8)
    labels = distilled.labels.numpy()
    for k in range(distilled.num_classes):
        for j, idx in enumerate(np.flatnonzero(labels == k)):
            grid[k * h:(k + 1) * h, j * w:(j + 1) * w] = pix[idx].transpose(1, 2, 0)
    return grid


def encode_pnm(grid: np.ndarray) -> bytes:
    h, w, c = grid.shape
    magic = "P6" if c == 3 else "P5"
    return f"{magic}\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(grid).tobytes()


def cmd_export_images(distilled_path: str | Path, out_path: str | Path, zca_path: Optional[str | Path] = None,
                      autoscale: bool = False) -> Path:
    distilled = dmod.load_distilled(distilled_path)
    stats = None
    if zca_path is not None:
        if not Path(zca_path).exists():
            raise ConfigError(f"export-images: ZCA stats requested but {zca_path} does not exist")
        stats = dmod.load_zca(zca_path)
    grid = image_grid(distilled, stats, autoscale)
    out = codec.atomic_write_bytes(out_path, encode_pnm(grid))
    print(f"[export-images] wrote {out} grid: {distilled.num_classes}x{distilled.ipc} size: {grid.shape[1]}x{grid.shape[0]}")
    return out


# --------------------------
# Entry point
# --------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddprune", description=__doc__.splitlines()[1])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train-teachers", "distill", "eval"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="INI run configuration")
        sp.add_argument("--seed", type=int, default=None, help="override [run] seed")
    ex = sub.add_parser("export-images")
    ex.add_argument("--distilled", required=True, help="DDD1 distilled-set file")
    ex.add_argument("--out", required=True, help="output .ppm/.pgm path")
    ex.add_argument("--zca", default=None, help="ZCA stats (.npz) to undo whitening before export")
    ex.add_argument("--autoscale", action="store_true", help="min-max scale each image before clamping")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logmod.setup()
    try:
        if args.command == "train-teachers":
            cmd_train_teachers(args.config, args.seed)
        elif args.command == "distill":
            cmd_distill(args.config, args.seed)
        elif args.command == "eval":
            cmd_eval(args.config, args.seed)
        else:
            cmd_export_images(args.distilled, args.out, args.zca, args.autoscale)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code = exit_code_for(exc)
        logger.error("%s failed: %s", args.command, exc, exc_info=code != EXIT_USAGE)
        print(f"ddprune {args.command}: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
