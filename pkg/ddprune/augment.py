# ddprune/augment.py
"""
Differentiable augmentation applied to distilled minibatches.

Every transform is linear in the pixels for a fixed draw (flip is a
permutation, shift a zero-padded translation, cutout a fixed 0/1 mask), so
autograd's transpose map is exact. One draw is shared by the whole minibatch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from .errors import ConfigError


class AugmentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    flip: bool = True
    shift: bool = True
    cutout: bool = False
    shift_max: int = Field(default=2, ge=0)
    cutout_size: int = Field(default=4, ge=1)
    stream: str = "augment"

    @property
    def enabled(self) -> bool:
        return self.flip or self.shift or self.cutout

    def validate_for(self, image_shape: Tuple[int, ...]) -> None:
        if len(image_shape) != 3:
            return
        side = min(image_shape[1], image_shape[2])
        if self.shift and self.shift_max >= side:
            raise ConfigError(f"augment: shift_max={self.shift_max} must be below the image side {side}")
        if self.cutout and self.cutout_size > side:
            raise ConfigError(f"augment: cutout_size={self.cutout_size} exceeds the image side {side}")


@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    dx: int = 0
    dy: int = 0
    cutout_center: Optional[Tuple[int, int]] = None
    cutout_size: int = 0

    @property
    def is_identity(self) -> bool:
        return not self.flip and self.dx == 0 and self.dy == 0 and self.cutout_center is None


IDENTITY = AugmentParams()


def sample_params(cfg: AugmentConfig, rng: np.random.Generator,
                  image_shape: Tuple[int, ...] = ()) -> AugmentParams:
    """One shared draw for a minibatch. Flat (non-image) inputs always get the identity."""
    if not cfg.enabled or len(image_shape) != 3:
        return IDENTITY
    _, h, w = image_shape
    flip = bool(rng.integers(0, 2)) if cfg.flip else False
    dx = dy = 0
    if cfg.shift and cfg.shift_max > 0:
        dx, dy = (int(v) for v in rng.integers(-cfg.shift_max, cfg.shift_max + 1, size=2))
    center = None
    if cfg.cutout:
        center = (int(rng.integers(0, h)), int(rng.integers(0, w)))
    return AugmentParams(flip=flip, dx=dx, dy=dy, cutout_center=center,
                         cutout_size=cfg.cutout_size if cfg.cutout else 0)


def _shift(x: torch.Tensor, dx: int, dy: int) -> torch.Tensor:
    m = max(abs(dx), abs(dy))
    h, w = x.shape[-2:]
    padded = F.pad(x, (m, m, m, m))
    return padded[..., m - dy:m - dy + h, m - dx:m - dx + w]


def cutout_mask(params: AugmentParams, h: int, w: int, dtype: torch.dtype) -> torch.Tensor:
    mask = torch.ones((h, w), dtype=dtype)
    if params.cutout_center is not None:
        cy, cx = params.cutout_center
        half = params.cutout_size // 2
        y0, x0 = max(cy - half, 0), max(cx - half, 0)
        y1, x1 = min(cy - half + params.cutout_size, h), min(cx - half + params.cutout_size, w)
        mask[y0:y1, x0:x1] = 0
    return mask


def apply(params: AugmentParams, images: torch.Tensor) -> torch.Tensor:
    if images.ndim != 4 or params.is_identity:
        return images
    x = images
    if params.flip:
        x = torch.flip(x, dims=(3,))
    if params.dx or params.dy:
        x = _shift(x, params.dx, params.dy)
    if params.cutout_center is not None:
        x = x * cutout_mask(params, x.shape[-2], x.shape[-1], x.dtype)
    return x
