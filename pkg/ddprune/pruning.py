# ddprune/pruning.py
"""
Difficult-to-match parameter detection.

A parameter pair (student, teacher) is difficult to match when its ratio
similarity min(a/b, b/a) falls below epsilon. Ratios are signed, so a pair
with opposite signs always has negative similarity and is pruned for any
epsilon >= 0. Conventions: both zero -> 1, exactly one zero -> 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InputDomainError, StructuralError

DEFAULT_EPSILON = 0.1
DEFAULT_FLOOR = 0.5


def similarity(a: float, b: float) -> float:
    a, b = float(a), float(b)
    if a == 0.0 and b == 0.0:
        return 1.0
    if a == 0.0 or b == 0.0:
        return 0.0
    return min(a / b, b / a)


def similarity_vec(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise similarity with the same conventions as `similarity`."""
    a = a.detach()
    b = b.detach()
    za, zb = a == 0, b == 0
    safe_a = torch.where(za, torch.ones_like(a), a)
    safe_b = torch.where(zb, torch.ones_like(b), b)
    s = torch.minimum(safe_a / safe_b, safe_b / safe_a)
    s = torch.where(za ^ zb, torch.zeros_like(s), s)
    return torch.where(za & zb, torch.ones_like(s), s)


@dataclass(frozen=True)
class PruneMask:
    keep: torch.Tensor
    floor_triggered: bool = False

    @property
    def p(self) -> int:
        return int(self.keep.numel())

    @property
    def u(self) -> int:
        return int(self.keep.sum())

    @property
    def pruned_indices(self) -> torch.Tensor:
        return torch.nonzero(~self.keep, as_tuple=False).flatten()

    @classmethod
    def all_keep(cls, p: int) -> "PruneMask":
        return cls(keep=torch.ones(p, dtype=torch.bool))


def compute_mask(student: torch.Tensor, teacher_target: torch.Tensor, epsilon: float = DEFAULT_EPSILON,
                 floor: float = DEFAULT_FLOOR) -> PruneMask:
    """
    keep[x] = similarity(student[x], target[x]) >= epsilon, unless fewer than
    `floor` of the slots survive. Zero similarity is never kept, so epsilon = 0
    still prunes one-sided zeros along with sign mismatches.
    """
    if student.shape != teacher_target.shape or student.ndim != 1:
        raise StructuralError(f"compute_mask: vectors of shape {tuple(student.shape)} and {tuple(teacher_target.shape)}")
    if not 0.0 <= epsilon < 1.0:
        raise InputDomainError(f"compute_mask: epsilon must lie in [0, 1), got {epsilon}")
    if not 0.0 <= floor <= 1.0:
        raise InputDomainError(f"compute_mask: floor must lie in [0, 1], got {floor}")
    s = similarity_vec(student, teacher_target)
    keep = (s >= epsilon) & (s > 0)
    if int(keep.sum()) < floor * keep.numel():
        return PruneMask(keep=torch.ones_like(keep), floor_triggered=True)
    return PruneMask(keep=keep)


def apply_mask(mask: PruneMask, v: torch.Tensor) -> torch.Tensor:
    """Order-preserving gather of the kept slots (length u); gradients reach kept slots only."""
    if v.ndim != 1 or v.numel() != mask.p:
        raise StructuralError(f"apply_mask: vector of shape {tuple(v.shape)} for a mask over {mask.p} slots")
    return v[mask.keep]
