# ddprune/teacher.py
"""
Teacher pretraining on the original dataset, per-epoch parameter snapshots,
the DDTB trajectory-buffer file, and sampling of matching segments.

DDTB layout (little-endian): magic "DDTB", u16 version, str arch, u32 N, u32 E,
u64 p, N*(E+1) blocks of p float32 (teacher-major, epoch-minor), str digest,
u32 seed count, seeds as u64.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from . import codec, streams
from .data import LabeledDataset
from .engine import cross_entropy
from .errors import ConfigError, FormatError, NumericError, StructuralError, TruncatedFileError
from .models import ArchSpec, forward, init_params, predict

logger = logging.getLogger(__name__)

BUFFER_MAGIC = b"DDTB"
BUFFER_VERSION = 1
TEACHER_OPTIMIZER = "sgd-momentum-fixed-lr-noaug-shuffle"


class TeacherConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    num_teachers: int = Field(default=10, ge=1)
    epochs: int = Field(default=20, ge=1)
    lr: float = Field(default=0.01, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    batch_size: int = Field(default=128, ge=1)
    workers: int = Field(default=1, ge=1)


@dataclass(eq=False)
class TrajectoryBuffer:
    """snapshots[n, i] is teacher n after i epochs (i = 0 is the initialization)."""

    arch: str
    snapshots: np.ndarray
    digest: str
    seeds: Tuple[int, ...]
    train_accuracy: Optional[List[float]] = field(default=None)

    def __post_init__(self) -> None:
        if self.snapshots.ndim != 3:
            raise StructuralError(f"TrajectoryBuffer: snapshots must be [N, E+1, p], got {self.snapshots.shape}")
        if len(self.seeds) not in (0, self.num_teachers):
            raise StructuralError(f"TrajectoryBuffer: {len(self.seeds)} seeds for {self.num_teachers} teachers")
        self.seeds = tuple(int(s) for s in self.seeds)

    @property
    def num_teachers(self) -> int:
        return int(self.snapshots.shape[0])

    @property
    def epochs(self) -> int:
        return int(self.snapshots.shape[1]) - 1

    @property
    def num_params(self) -> int:
        return int(self.snapshots.shape[2])

    @property
    def spec(self) -> ArchSpec:
        return ArchSpec.parse(self.arch)

    def snapshot(self, n: int, i: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.snapshots[n, i].astype(np.float32)).to(dtype)


@dataclass(frozen=True)
class StartSample:
    teacher: int
    epoch: int
    start: torch.Tensor   # theta_i
    target: torch.Tensor  # theta_{i+K}


def check_start_bounds(epochs: int, max_start_epoch: int, teacher_epochs: int) -> None:
    if max_start_epoch < 1:
        raise ConfigError(f"max_start_epoch must be >= 1, got {max_start_epoch}")
    if max_start_epoch + teacher_epochs > epochs:
        raise ConfigError(f"max_start_epoch + teacher_epochs = {max_start_epoch + teacher_epochs} "
                          f"exceeds the {epochs} recorded teacher epochs")


def sample_start(buf: TrajectoryBuffer, max_start_epoch: int, teacher_epochs: int, rng: np.random.Generator,
                 dtype: torch.dtype = torch.float32) -> StartSample:
    """Fresh (teacher, i) pair with i uniform in [0, I+); returns theta_i and theta_{i+K}."""
    check_start_bounds(buf.epochs, max_start_epoch, teacher_epochs)
    n = int(rng.integers(0, buf.num_teachers))
    i = int(rng.integers(0, max_start_epoch))
    return StartSample(teacher=n, epoch=i, start=buf.snapshot(n, i, dtype),
                       target=buf.snapshot(n, i + teacher_epochs, dtype))


# --------------------------
# Training
# --------------------------

def training_digest(dataset: LabeledDataset, spec: ArchSpec, cfg: TeacherConfig, seeds: Sequence[int]) -> str:
    return codec.digest(dataset.digest(), str(spec), ",".join(str(int(s)) for s in seeds),
                        f"lr={cfg.lr!r} momentum={cfg.momentum!r} epochs={cfg.epochs} batch={cfg.batch_size}",
                        TEACHER_OPTIMIZER)


def accuracy(spec: ArchSpec, params: torch.Tensor, ds: LabeledDataset) -> float:
    if len(ds) == 0:
        return float("nan")
    pred = predict(spec, params, ds.images.to(params.dtype))
    return float((pred == ds.labels).double().mean())


def train_one(dataset: LabeledDataset, spec: ArchSpec, cfg: TeacherConfig, seed: int,
              index: int = 0) -> Tuple[np.ndarray, float]:
    """Train a single teacher; returns its (E+1, p) float32 snapshots and final train accuracy."""
    params = init_params(spec, seed).requires_grad_(True)
    opt = torch.optim.SGD([params], lr=cfg.lr, momentum=cfg.momentum)
    rng = streams.generator(seed, "teacher.shuffle")
    n = len(dataset)
    snaps = np.empty((cfg.epochs + 1, params.numel()), dtype=np.float32)
    snaps[0] = params.detach().numpy()
    x_all = dataset.images.to(params.dtype)
    for epoch in range(1, cfg.epochs + 1):
        order = torch.as_tensor(rng.permutation(n), dtype=torch.long)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = cross_entropy(forward(spec, params, x_all.index_select(0, idx)), dataset.labels.index_select(0, idx))
            if not torch.isfinite(loss):
                raise NumericError("train_teachers: loss diverged", teacher=index, epoch=epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
        if not bool(torch.isfinite(params).all()):
            raise NumericError("train_teachers: parameters diverged", teacher=index, epoch=epoch)
        snaps[epoch] = params.detach().numpy()
    acc = accuracy(spec, params.detach(), dataset)
    logger.info("teacher %d (seed %d): final train accuracy %.4f", index, seed, acc)
    return snaps, acc


def teacher_seeds(root_seed: int, num_teachers: int) -> List[int]:
    return [streams.derive_seed(root_seed, f"teacher.{n}") for n in range(num_teachers)]


def train_teachers(dataset: LabeledDataset, spec: ArchSpec, cfg: TeacherConfig,
                   seeds: Optional[Sequence[int]] = None, root_seed: int = 0) -> TrajectoryBuffer:
    if len(dataset) == 0:
        raise StructuralError("train_teachers: empty training split")
    spec = spec if spec.is_bound else spec.bind(dataset.image_shape, dataset.num_classes)
    spec.check()
    seeds = list(seeds) if seeds is not None else teacher_seeds(root_seed, cfg.num_teachers)
    if len(seeds) != cfg.num_teachers:
        raise ConfigError(f"train_teachers: {len(seeds)} seeds for {cfg.num_teachers} teachers")

    jobs = list(enumerate(seeds))
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(lambda a: train_one(dataset, spec, cfg, a[1], a[0]), jobs))
    else:
        results = [train_one(dataset, spec, cfg, s, n) for n, s in jobs]

    return TrajectoryBuffer(arch=str(spec), snapshots=np.stack([r[0] for r in results]),
                            digest=training_digest(dataset, spec, cfg, seeds), seeds=tuple(seeds),
                            train_accuracy=[r[1] for r in results])


# --------------------------
# Persistence
# --------------------------

def save_buffer(buf: TrajectoryBuffer, path: str | Path) -> Path:
    n, e1, p = buf.snapshots.shape
    header = (BUFFER_MAGIC + codec.pack("H", BUFFER_VERSION) + codec.pack_str(buf.arch)
              + codec.pack("IIQ", n, e1 - 1, p))
    trailer = (codec.pack_str(buf.digest) + codec.pack("I", len(buf.seeds))
               + codec.pack(f"{len(buf.seeds)}Q", *buf.seeds))

    def blocks():
        yield header
        for t in range(n):
            yield codec.array_bytes(buf.snapshots[t], np.float32)
        yield trailer

    return codec.atomic_write_bytes(path, blocks())


@dataclass(frozen=True)
class _Header:
    arch: str
    num_teachers: int
    epochs: int
    num_params: int
    payload_offset: int

    @property
    def teacher_bytes(self) -> int:
        return (self.epochs + 1) * self.num_params * 4


def _read_header(r: codec.Reader, path: Path, size: int, expect_arch: Optional[str]) -> _Header:
    r.expect_magic(BUFFER_MAGIC, BUFFER_VERSION)
    arch = r.read_str()
    n, e, p = r.unpack("IIQ")
    if expect_arch is not None and arch != expect_arch and ArchSpec.parse(arch).name != expect_arch:
        raise FormatError(f"load_buffer({path}): buffer architecture {arch} does not match expected {expect_arch}")
    h = _Header(arch, int(n), int(e), int(p), r.offset)
    end = h.payload_offset + h.num_teachers * h.teacher_bytes
    if size < end:
        raise TruncatedFileError(f"load_buffer({path}): snapshot payload needs {end} bytes, file has {size}", size)
    return h


def load_buffer(path: str | Path, expect_arch: Optional[str] = None) -> TrajectoryBuffer:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"load_buffer: no such file {path}")
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        r = codec.Reader(fh, f"load_buffer({path})")
        h = _read_header(r, path, size, expect_arch)
        snaps = r.read_array(np.float32, h.num_teachers * (h.epochs + 1) * h.num_params)
        digest = r.read_str()
        count = r.unpack("I")
        seeds = r.unpack(f"{count}Q") if count else ()
        seeds = (seeds,) if isinstance(seeds, int) else tuple(seeds)
        r.expect_end()
    snaps = snaps.astype(np.float32).reshape(h.num_teachers, h.epochs + 1, h.num_params)
    return TrajectoryBuffer(arch=h.arch, snapshots=snaps, digest=digest, seeds=seeds)


def load_teacher(path: str | Path, n: int) -> np.ndarray:
    """(E+1, p) snapshots of teacher n, read without touching the other teachers' blocks."""
    path = Path(path)
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        r = codec.Reader(fh, f"load_teacher({path})")
        h = _read_header(r, path, size, None)
        if not 0 <= n < h.num_teachers:
            raise StructuralError(f"load_teacher: teacher {n} out of range [0, {h.num_teachers})")
        r.skip(n * h.teacher_bytes)
        block = r.read_array(np.float32, (h.epochs + 1) * h.num_params)
    return block.astype(np.float32).reshape(h.epochs + 1, h.num_params)
