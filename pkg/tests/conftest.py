import pytest
import torch

from ddprune.data import make_blobs
from ddprune.models import ArchSpec
from ddprune.teacher import TeacherConfig, train_teachers


def central_diff(f, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central finite differences of scalar f at every entry of x (float64)."""
    x = x.detach().clone()
    out = torch.zeros_like(x)
    flat, gflat = x.view(-1), out.view(-1)
    for k in range(flat.numel()):
        orig = flat[k].item()
        flat[k] = orig + h
        up = float(f(x))
        flat[k] = orig - h
        down = float(f(x))
        flat[k] = orig
        gflat[k] = (up - down) / (2 * h)
    return out


def max_rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    scale = max(float(b.abs().max()), 1e-12)
    return float((a - b).abs().max()) / scale


@pytest.fixture
def fd():
    return central_diff


@pytest.fixture
def rel_err():
    return max_rel_err


@pytest.fixture
def tiny_spec():
    # 8 -> 4 -> 3 MLP
    return ArchSpec.parse("mlp-d2-w4").bind((8,), 3)


@pytest.fixture(scope="session")
def tiny_blobs():
    train = make_blobs(3, 30, (8,), separation=1.5, seed=7, split="train")
    test = make_blobs(3, 30, (8,), separation=1.5, seed=7, split="test")
    return train, test


@pytest.fixture(scope="session")
def tiny_buffer(tiny_blobs):
    train, _ = tiny_blobs
    spec = ArchSpec.parse("mlp-d2-w4").bind((8,), 3)
    cfg = TeacherConfig(num_teachers=2, epochs=4, lr=0.05, momentum=0.9, batch_size=16)
    return train_teachers(train, spec, cfg, root_seed=3)
