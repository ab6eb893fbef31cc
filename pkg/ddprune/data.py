# ddprune/data.py
"""
Datasets, desk-scale toy generators, file ingestion, ZCA whitening and the
distilled-set container with its persistence format.

File formats (all little-endian):

  DDS1 (LabeledDataset)   magic, u16 version, u8 dtype tag, u8 split, u8 ndim,
                          ndim x u32 image dims (N first), u32 classes,
                          image payload, N x i32 labels
  DDD1 (DistilledDataset) magic, u16 version, u8 dtype tag, u8 ndim,
                          ndim x u32 image dims, u32 classes, u32 ipc, f64 alpha,
                          str config hash, u64 steps, str arch,
                          image payload, N x i32 labels
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
import pandas as pd
import torch
from scipy import linalg

from . import codec, streams
from .errors import FormatError, InputDomainError, StructuralError

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"DDS1"
DISTILLED_MAGIC = b"DDD1"
FORMAT_VERSION = 1
SPLITS = ("train", "test")

DEFAULT_ZCA_LAMBDA = 0.1
DEFAULT_SEPARATION = 1.0
DEFAULT_BLOB_NOISE = 1.0
BLOB_PATTERN_CELL = 4  # blob class means are piecewise constant on 4x4 pixel cells


# --------------------------
# Containers
# --------------------------

@dataclass
class LabeledDataset:
    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    split: str = "train"

    def __post_init__(self) -> None:
        self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        if self.split not in SPLITS:
            raise InputDomainError(f"LabeledDataset: split must be one of {SPLITS}, got {self.split!r}")
        if self.images.ndim < 2 or self.images.shape[0] != self.labels.shape[0]:
            raise StructuralError(f"LabeledDataset: {tuple(self.images.shape)} images for {self.labels.shape[0]} labels")
        if self.num_classes < 1:
            raise InputDomainError("LabeledDataset: num_classes must be positive")
        if len(self.labels) and (int(self.labels.min()) < 0 or int(self.labels.max()) >= self.num_classes):
            raise InputDomainError(f"LabeledDataset: labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels.numpy(), minlength=self.num_classes)

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        idx = torch.as_tensor(np.asarray(indices), dtype=torch.long)
        return LabeledDataset(self.images.index_select(0, idx).clone(), self.labels.index_select(0, idx).clone(),
                              self.num_classes, self.split)

    def digest(self) -> str:
        return codec.digest(self.images.detach().numpy(), self.labels.numpy(), str(self.num_classes))


@dataclass
class Provenance:
    config_hash: str = "init"
    steps: int = 0
    arch: str = ""


@dataclass
class DistilledDataset:
    """Learnable images + fixed labels (ipc per class) + learnable learning rate alpha."""

    images: torch.Tensor
    labels: torch.Tensor
    alpha: torch.Tensor
    ipc: int
    num_classes: int
    provenance: Provenance = field(default_factory=Provenance)

    def __post_init__(self) -> None:
        self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        self.alpha = torch.as_tensor(self.alpha, dtype=self.images.dtype).reshape(())
        if self.images.shape[0] != self.ipc * self.num_classes or self.labels.shape[0] != self.images.shape[0]:
            raise StructuralError(f"DistilledDataset: expected {self.ipc * self.num_classes} images and labels, "
                                  f"got {self.images.shape[0]} / {self.labels.shape[0]}")
        counts = np.bincount(self.labels.numpy(), minlength=self.num_classes)
        if counts.shape[0] != self.num_classes or not np.all(counts == self.ipc):
            raise StructuralError(f"DistilledDataset: every class needs exactly {self.ipc} images, got {counts.tolist()}")
        if not float(self.alpha) > 0:
            raise InputDomainError(f"DistilledDataset: alpha must be positive, got {float(self.alpha)}")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def as_labeled(self) -> LabeledDataset:
        return LabeledDataset(self.images.detach().clone(), self.labels.clone(), self.num_classes, "train")

    def clone(self) -> "DistilledDataset":
        return DistilledDataset(self.images.detach().clone(), self.labels.clone(), self.alpha.detach().clone(),
                                self.ipc, self.num_classes, replace(self.provenance))

    def digest(self) -> str:
        return codec.digest(self.images.detach().numpy(), self.labels.numpy(),
                            self.alpha.detach().numpy().reshape(1))


@dataclass
class ZCAStats:
    mean: np.ndarray
    whitening: np.ndarray
    regularizer: float
    dewhitening: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])


# --------------------------
# Generators & sampling
# --------------------------

def _blob_means(num_classes: int, shape: Tuple[int, ...], separation: float, rng: np.random.Generator) -> np.ndarray:
    if len(shape) == 3:
        c, h, w = shape
        ch, cw = -(-h // BLOB_PATTERN_CELL), -(-w // BLOB_PATTERN_CELL)
        coarse = rng.standard_normal((num_classes, c, ch, cw))
        cell = np.ones((BLOB_PATTERN_CELL, BLOB_PATTERN_CELL))
        means = np.stack([np.stack([np.kron(coarse[k, j], cell)[:h, :w] for j in range(c)])
                          for k in range(num_classes)])
    else:
        means = rng.standard_normal((num_classes,) + tuple(shape))
    flat = means.reshape(num_classes, -1)
    rms = np.sqrt((flat ** 2).mean(axis=1)).reshape((num_classes,) + (1,) * len(shape))
    return separation * means / rms


def make_blobs(num_classes: int, per_class: int, shape: Tuple[int, ...] | int, separation: float = DEFAULT_SEPARATION,
               seed: int = 0, split: str = "train", noise: float = DEFAULT_BLOB_NOISE,
               dtype: torch.dtype = torch.float32) -> LabeledDataset:
    """
    Gaussian class clusters. Class means depend only on `seed`, so the train and
    test splits of one seed share their clusters; the noise draw depends on split.
    Image shapes (C, H, W) get low-resolution mean patterns.
    """
    if per_class < 1 or num_classes < 1:
        raise InputDomainError(f"make_blobs: need per_class >= 1 and num_classes >= 1, got {per_class}, {num_classes}")
    if not separation > 0:
        raise InputDomainError(f"make_blobs: separation must be positive, got {separation}")
    shape = (int(shape),) if isinstance(shape, int) else tuple(int(d) for d in shape)
    means = _blob_means(num_classes, shape, float(separation), streams.generator(seed, "data.blobs.means"))
    rng = streams.generator(seed, f"data.blobs.{split}")
    labels = np.repeat(np.arange(num_classes), per_class)
    x = means[labels] + noise * rng.standard_normal((labels.shape[0],) + shape)
    return LabeledDataset(torch.from_numpy(x).to(dtype), torch.from_numpy(labels), num_classes, split)


def select_per_class(labels: torch.Tensor | np.ndarray, num_classes: int, ipc: int,
                     rng: np.random.Generator) -> np.ndarray:
    """ipc indices per class drawn uniformly without replacement, ordered class-major."""
    labels = np.asarray(labels)
    out = []
    for c in range(num_classes):
        pool = np.flatnonzero(labels == c)
        if pool.shape[0] < ipc:
            raise InputDomainError(f"select_per_class: class {c} has {pool.shape[0]} examples, need {ipc}")
        out.append(np.sort(rng.choice(pool, size=ipc, replace=False)))
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def init_distilled(source: LabeledDataset, ipc: int, alpha0: float, seed: int) -> DistilledDataset:
    if ipc < 1:
        raise InputDomainError(f"init_distilled: ipc must be >= 1, got {ipc}")
    if not alpha0 > 0:
        raise InputDomainError(f"init_distilled: alpha0 must be positive, got {alpha0}")
    idx = select_per_class(source.labels, source.num_classes, ipc, streams.generator(seed, "distill.init"))
    t = torch.as_tensor(idx, dtype=torch.long)
    return DistilledDataset(
        images=source.images.index_select(0, t).detach().clone(),
        labels=source.labels.index_select(0, t).clone(),
        alpha=torch.tensor(alpha0, dtype=source.images.dtype),
        ipc=ipc,
        num_classes=source.num_classes,
    )


# --------------------------
# ZCA whitening
# --------------------------

def zca_fit(train: LabeledDataset, lam: float = DEFAULT_ZCA_LAMBDA) -> ZCAStats:
    """W = E (Lambda + lam I)^(-1/2) E^T from the eigendecomposition of the pixel covariance."""
    if not lam > 0:
        raise InputDomainError(f"zca_fit: regularizer must be positive, got {lam}")
    n = len(train)
    if n < 2:
        raise InputDomainError(f"zca_fit: need at least 2 examples, got {n}")
    x = train.images.detach().reshape(n, -1).double().numpy()
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    evals, evecs = linalg.eigh(cov)
    evals = np.clip(evals, 0.0, None)
    w = (evecs / np.sqrt(evals + lam)) @ evecs.T
    dw = (evecs * np.sqrt(evals + lam)) @ evecs.T
    logger.debug("zca_fit: dim=%d lambda=%g eig range [%.3g, %.3g]", x.shape[1], lam, evals.min(), evals.max())
    return ZCAStats(mean=mean, whitening=0.5 * (w + w.T), regularizer=float(lam), dewhitening=0.5 * (dw + dw.T))


def _check_zca_dim(stats: ZCAStats, images: torch.Tensor, where: str) -> int:
    d = int(math.prod(images.shape[1:]))
    if d != stats.dim:
        raise StructuralError(f"{where}: images have {d} pixels, stats were fitted on {stats.dim}")
    return d


def zca_apply(stats: ZCAStats, images: torch.Tensor) -> torch.Tensor:
    """(x - mean) W, differentiable in the images."""
    d = _check_zca_dim(stats, images, "zca_apply")
    mean = torch.as_tensor(stats.mean, dtype=images.dtype)
    w = torch.as_tensor(stats.whitening, dtype=images.dtype)
    flat = images.reshape(images.shape[0], d)
    return ((flat - mean) @ w).reshape(images.shape)


def zca_unapply(stats: ZCAStats, images: torch.Tensor) -> torch.Tensor:
    d = _check_zca_dim(stats, images, "zca_unapply")
    inv = stats.dewhitening if stats.dewhitening is not None else linalg.inv(stats.whitening)
    flat = images.detach().reshape(images.shape[0], d).double() @ torch.as_tensor(inv, dtype=torch.float64)
    return (flat + torch.as_tensor(stats.mean, dtype=torch.float64)).to(images.dtype).reshape(images.shape)


def whiten(ds: LabeledDataset, stats: ZCAStats) -> LabeledDataset:
    return LabeledDataset(zca_apply(stats, ds.images).detach(), ds.labels.clone(), ds.num_classes, ds.split)


def save_zca(stats: ZCAStats, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, mean=stats.mean, whitening=stats.whitening,
                 dewhitening=stats.dewhitening if stats.dewhitening is not None else linalg.inv(stats.whitening),
                 regularizer=np.array(stats.regularizer))
    return path


def load_zca(path: str | Path) -> ZCAStats:
    with np.load(Path(path)) as z:
        return ZCAStats(mean=z["mean"], whitening=z["whitening"], regularizer=float(z["regularizer"]),
                        dewhitening=z["dewhitening"])


# --------------------------
# Files
# --------------------------

def _np_dtype(t: torch.Tensor) -> np.dtype:
    return np.dtype("float64") if t.dtype == torch.float64 else np.dtype("float32")


def save_dataset(ds: LabeledDataset, path: str | Path) -> Path:
    images = ds.images.detach().numpy()
    dt = _np_dtype(ds.images)
    header = (DATASET_MAGIC + codec.pack("H", FORMAT_VERSION)
              + codec.pack("BBB", codec.dtype_tag(dt), SPLITS.index(ds.split), images.ndim)
              + codec.pack(f"{images.ndim}I", *images.shape) + codec.pack("I", ds.num_classes))
    return codec.atomic_write_bytes(path, [header, codec.array_bytes(images, dt),
                                           codec.array_bytes(ds.labels.numpy(), np.int32)])


def _load_raw(path: Path) -> LabeledDataset:
    with open(path, "rb") as fh:
        r = codec.Reader(fh, f"load_dataset({path})")
        r.expect_magic(DATASET_MAGIC, FORMAT_VERSION)
        tag, split, ndim = r.unpack("BBB")
        if split >= len(SPLITS):
            raise FormatError(f"load_dataset({path}): unknown split tag {split}")
        dims = r.unpack(f"{ndim}I")
        dims = (dims,) if isinstance(dims, int) else tuple(dims)
        num_classes = r.unpack("I")
        dt = codec.dtype_for_tag(tag)
        images = r.read_array(dt, math.prod(dims)).reshape(dims)
        labels = r.read_array(np.int32, dims[0])
        r.expect_end()
    return LabeledDataset(torch.from_numpy(images.astype(dt.newbyteorder("="))),
                          torch.from_numpy(labels.astype(np.int64)), int(num_classes), SPLITS[split])


def _load_csv(path: Path, image_shape: Tuple[int, ...] | None, num_classes: int | None,
              split: str) -> LabeledDataset:
    df = pd.read_csv(path)
    if df.empty or df.columns[0] != "label":
        raise FormatError(f"load_dataset({path}): CSV must start with a 'label' column and hold at least one row")
    labels = pd.to_numeric(df["label"], errors="raise").astype(np.int64).to_numpy()
    pix = df.drop(columns=["label"]).to_numpy(dtype=np.float32)
    if image_shape:
        if math.prod(image_shape) != pix.shape[1]:
            raise StructuralError(f"load_dataset({path}): {pix.shape[1]} pixel columns do not fill {image_shape}")
        pix = pix.reshape((pix.shape[0],) + tuple(image_shape))
    classes = int(num_classes) if num_classes else int(labels.max()) + 1
    return LabeledDataset(torch.from_numpy(pix), torch.from_numpy(labels), classes, split)


def load_dataset(path: str | Path, format: str = "raw", image_shape: Tuple[int, ...] | None = None,
                 num_classes: int | None = None, split: str = "train") -> LabeledDataset:
    """Read a DDS1 raw-binary file or a 'label,pix0,pix1,...' CSV with a header row."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"load_dataset: no such file {path}")
    if format in ("raw", "raw-binary"):
        return _load_raw(path)
    if format == "csv":
        return _load_csv(path, image_shape, num_classes, split)
    raise FormatError(f"load_dataset: unknown format {format!r}")


def save_distilled(ds: DistilledDataset, path: str | Path) -> Path:
    images = ds.images.detach().numpy()
    dt = _np_dtype(ds.images)
    p = ds.provenance
    header = (DISTILLED_MAGIC + codec.pack("H", FORMAT_VERSION)
              + codec.pack("BB", codec.dtype_tag(dt), images.ndim)
              + codec.pack(f"{images.ndim}I", *images.shape)
              + codec.pack("IId", ds.num_classes, ds.ipc, float(ds.alpha))
              + codec.pack_str(p.config_hash) + codec.pack("Q", int(p.steps)) + codec.pack_str(p.arch))
    return codec.atomic_write_bytes(path, [header, codec.array_bytes(images, dt),
                                           codec.array_bytes(ds.labels.numpy(), np.int32)])


def load_distilled(path: str | Path) -> DistilledDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"load_distilled: no such file {path}")
    with open(path, "rb") as fh:
        r = codec.Reader(fh, f"load_distilled({path})")
        r.expect_magic(DISTILLED_MAGIC, FORMAT_VERSION)
        tag, ndim = r.unpack("BB")
        dims = r.unpack(f"{ndim}I")
        dims = (dims,) if isinstance(dims, int) else tuple(dims)
        num_classes, ipc, alpha = r.unpack("IId")
        config_hash = r.read_str()
        steps = r.unpack("Q")
        arch = r.read_str()
        dt = codec.dtype_for_tag(tag)
        images = r.read_array(dt, math.prod(dims)).reshape(dims)
        labels = r.read_array(np.int32, dims[0])
        r.expect_end()
    t = torch.from_numpy(images.astype(dt.newbyteorder("=")))
    return DistilledDataset(images=t, labels=torch.from_numpy(labels.astype(np.int64)),
                            alpha=torch.tensor(alpha, dtype=torch.float64).to(t.dtype),
                            ipc=int(ipc), num_classes=int(num_classes),
                            provenance=Provenance(config_hash=config_hash, steps=int(steps), arch=arch))


def class_grid(ds: DistilledDataset) -> Dict[int, torch.Tensor]:
    """Images of each class in file order (rows of an export grid)."""
    return {c: ds.images[ds.labels == c] for c in range(ds.num_classes)}
