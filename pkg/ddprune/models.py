# ddprune/models.py
"""
Desk-scale architecture family: a ConvNet of repeated
[conv3x3 -> instance norm -> smooth activation -> 2x avg pool] blocks with a
linear head, and a plain MLP. Networks are pure functions of a flat parameter
vector so the engine can differentiate through parameter updates.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Dict, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import StructuralError

KINDS = ("convnet", "mlp")
ACTIVATIONS = ("softplus", "gelu")
DEFAULT_ACTIVATION = "softplus"
NORM_EPS = 1e-5

_SPEC_RE = re.compile(
    r"^(?P<kind>convnet|mlp)-d(?P<depth>\d+)-w(?P<width>\d+)"
    r"(?:-(?P<act>softplus|gelu))?"
    r"(?:-in(?P<shape>\d+(?:x\d+)*)-c(?P<classes>\d+))?$"
)


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: Tuple[int, ...]

    @property
    def length(self) -> int:
        return int(math.prod(self.shape))


@dataclass(frozen=True)
class ParamLayout:
    """Ordered per-layer segment table of a flat parameter vector."""

    segments: Tuple[Segment, ...]

    @property
    def size(self) -> int:
        return sum(s.length for s in self.segments)

    def unflatten(self, vec: torch.Tensor) -> Dict[str, torch.Tensor]:
        if vec.ndim != 1 or vec.numel() != self.size:
            raise StructuralError(f"unflatten: expected a vector of {self.size} parameters, got shape {tuple(vec.shape)}")
        return {s.name: vec[s.offset:s.offset + s.length].view(s.shape) for s in self.segments}

    def flatten(self, tensors: Dict[str, torch.Tensor]) -> torch.Tensor:
        missing = [s.name for s in self.segments if s.name not in tensors]
        if missing:
            raise StructuralError(f"flatten: missing segments {missing}")
        parts = []
        for s in self.segments:
            t = tensors[s.name]
            if tuple(t.shape) != s.shape:
                raise StructuralError(f"flatten: segment {s.name} has shape {tuple(t.shape)}, expected {s.shape}")
            parts.append(t.reshape(-1))
        return torch.cat(parts)


@dataclass(frozen=True)
class ArchSpec:
    kind: str
    depth: int
    width: int
    input_shape: Tuple[int, ...] = ()
    num_classes: int = 0
    activation: str = DEFAULT_ACTIVATION

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise StructuralError(f"ArchSpec: unknown kind {self.kind!r}")
        if self.depth < 1 or self.width < 1:
            raise StructuralError(f"ArchSpec: depth and width must be positive, got d={self.depth} w={self.width}")
        if self.activation not in ACTIVATIONS:
            raise StructuralError(f"ArchSpec: unknown activation {self.activation!r}")
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))

    # ---- naming ----

    @property
    def name(self) -> str:
        """Short canonical name, e.g. 'convnet-d3-w32'."""
        s = f"{self.kind}-d{self.depth}-w{self.width}"
        if self.activation != DEFAULT_ACTIVATION:
            s += f"-{self.activation}"
        return s

    def __str__(self) -> str:
        if not self.is_bound:
            return self.name
        return f"{self.name}-in{'x'.join(str(d) for d in self.input_shape)}-c{self.num_classes}"

    @classmethod
    def parse(cls, text: str, input_shape: Tuple[int, ...] | None = None,
              num_classes: int | None = None) -> "ArchSpec":
        m = _SPEC_RE.match(text.strip())
        if not m:
            raise StructuralError(f"ArchSpec.parse: cannot parse {text!r}")
        shape = tuple(int(d) for d in m["shape"].split("x")) if m["shape"] else ()
        classes = int(m["classes"]) if m["classes"] else 0
        spec = cls(kind=m["kind"], depth=int(m["depth"]), width=int(m["width"]),
                   input_shape=shape, num_classes=classes,
                   activation=m["act"] or DEFAULT_ACTIVATION)
        if input_shape is not None or num_classes is not None:
            spec = spec.bind(input_shape if input_shape is not None else shape,
                             num_classes if num_classes is not None else classes)
        return spec

    def bind(self, input_shape: Tuple[int, ...], num_classes: int) -> "ArchSpec":
        """Attach the data geometry; parameter counts need it."""
        return replace(self, input_shape=tuple(int(d) for d in input_shape), num_classes=int(num_classes))

    @property
    def is_bound(self) -> bool:
        return bool(self.input_shape) and self.num_classes > 0

    # ---- geometry ----

    def check(self) -> None:
        """Raise StructuralError if this spec cannot run on its input shape."""
        if not self.is_bound:
            raise StructuralError(f"{self.name}: input shape and class count are not set")
        if self.num_classes < 2:
            raise StructuralError(f"{self}: need at least 2 classes")
        if self.kind == "convnet":
            if len(self.input_shape) != 3:
                raise StructuralError(f"{self}: convnet needs CxHxW inputs, got {self.input_shape}")
            _, h, w = self.input_shape
            step = 2 ** self.depth
            if h % step or w % step:
                raise StructuralError(f"{self}: input {h}x{w} is not divisible by 2^depth={step}")

    @cached_property
    def layout(self) -> ParamLayout:
        self.check()
        segs = []
        offset = 0

        def add(name: str, shape: Tuple[int, ...]) -> None:
            nonlocal offset
            segs.append(Segment(name, offset, shape))
            offset += int(math.prod(shape))

        if self.kind == "mlp":
            d_in = int(math.prod(self.input_shape))
            dims = [d_in] + [self.width] * (self.depth - 1) + [self.num_classes]
            for k in range(self.depth):
                add(f"fc{k}.weight", (dims[k + 1], dims[k]))
                add(f"fc{k}.bias", (dims[k + 1],))
        else:
            c, h, w = self.input_shape
            for k in range(self.depth):
                add(f"conv{k}.weight", (self.width, c if k == 0 else self.width, 3, 3))
                add(f"conv{k}.bias", (self.width,))
            feat = self.width * (h >> self.depth) * (w >> self.depth)
            add("head.weight", (self.num_classes, feat))
            add("head.bias", (self.num_classes,))
        return ParamLayout(tuple(segs))


def param_count(spec: ArchSpec) -> int:
    return spec.layout.size


def init_params(spec: ArchSpec, seed: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Fan-in uniform weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases; bit-reproducible per seed."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & ((1 << 64) - 1)))
    out = np.zeros(param_count(spec), dtype=np.float64)
    for seg in spec.layout.segments:
        if seg.name.endswith(".bias"):
            continue
        fan_in = int(math.prod(seg.shape[1:]))
        bound = 1.0 / math.sqrt(fan_in)
        out[seg.offset:seg.offset + seg.length] = rng.uniform(-bound, bound, size=seg.length)
    return torch.from_numpy(out).to(dtype)


def _activation(name: str):
    if name == "gelu":
        return F.gelu
    return F.softplus


def _instance_norm(h: torch.Tensor) -> torch.Tensor:
    # affine off: every learnable parameter lives in conv/linear layers
    mean = h.mean(dim=(2, 3), keepdim=True)
    var = h.var(dim=(2, 3), keepdim=True, unbiased=False)
    return (h - mean) / torch.sqrt(var + NORM_EPS)


def check_images(spec: ArchSpec, images: torch.Tensor, where: str = "forward") -> None:
    if tuple(images.shape[1:]) != spec.input_shape:
        if spec.kind == "mlp" and images.ndim >= 2 and int(math.prod(images.shape[1:])) == math.prod(spec.input_shape):
            return
        raise StructuralError(f"{where}: images of shape {tuple(images.shape)} do not fit {spec}")


def forward(spec: ArchSpec, params: torch.Tensor, images: torch.Tensor) -> torch.Tensor:
    """Logits [B x C]; batch rows are independent."""
    check_images(spec, images)
    images = images.to(params.dtype)
    w = spec.layout.unflatten(params)
    act = _activation(spec.activation)
    if spec.kind == "mlp":
        h = images.reshape(images.shape[0], -1)
        for k in range(spec.depth):
            h = F.linear(h, w[f"fc{k}.weight"], w[f"fc{k}.bias"])
            if k < spec.depth - 1:
                h = act(h)
        return h

    h = images
    for k in range(spec.depth):
        h = F.conv2d(h, w[f"conv{k}.weight"], w[f"conv{k}.bias"], padding=1)
        h = act(_instance_norm(h))
        h = F.avg_pool2d(h, 2)
    return F.linear(h.flatten(1), w["head.weight"], w["head.bias"])


def predict(spec: ArchSpec, params: torch.Tensor, images: torch.Tensor, batch_size: int = 1024) -> torch.Tensor:
    with torch.no_grad():
        out = [forward(spec, params, images[i:i + batch_size]).argmax(dim=1)
               for i in range(0, images.shape[0], batch_size)]
    return torch.cat(out) if out else torch.empty(0, dtype=torch.long)
