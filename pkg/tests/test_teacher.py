import numpy as np
import pytest
import torch
from scipy import stats as sps

from ddprune.data import LabeledDataset, make_blobs
from ddprune.errors import ConfigError, FormatError, StructuralError, TruncatedFileError
from ddprune.models import ArchSpec
from ddprune.teacher import (TeacherConfig, check_start_bounds, load_buffer, load_teacher, sample_start, save_buffer,
                             train_teachers, training_digest)


def _small(tiny_blobs, epochs=2, seeds=(1, 2)):
    train, _ = tiny_blobs
    spec = ArchSpec.parse("mlp-d2-w4").bind((8,), 3)
    cfg = TeacherConfig(num_teachers=len(seeds), epochs=epochs, lr=0.05, batch_size=16)
    return train_teachers(train, spec, cfg, seeds=seeds), train, spec, cfg


def test_snapshot_count_is_epochs_plus_one(tiny_blobs):
    buf, *_ = _small(tiny_blobs, epochs=2)
    assert buf.snapshots.shape[:2] == (2, 3) and buf.epochs == 2 and buf.num_params == 51


def test_same_seeds_bit_identical_files(tmp_path, tiny_blobs):
    a, *_ = _small(tiny_blobs)
    b, *_ = _small(tiny_blobs)
    assert save_buffer(a, tmp_path / "a.ddtb").read_bytes() == save_buffer(b, tmp_path / "b.ddtb").read_bytes()


def test_separable_blobs_reach_high_train_accuracy():
    train = make_blobs(3, 50, (8,), separation=4.0, seed=0)
    spec = ArchSpec.parse("mlp-d2-w8").bind((8,), 3)
    buf = train_teachers(train, spec, TeacherConfig(num_teachers=1, epochs=10, lr=0.05, batch_size=16))
    assert buf.train_accuracy[0] >= 0.95


def test_save_load_round_trip(tmp_path, tiny_buffer):
    path = save_buffer(tiny_buffer, tmp_path / "t.ddtb")
    got = load_buffer(path, expect_arch=tiny_buffer.arch)
    assert np.array_equal(got.snapshots, tiny_buffer.snapshots)
    assert got.digest == tiny_buffer.digest and got.seeds == tiny_buffer.seeds and got.arch == tiny_buffer.arch
    assert np.array_equal(load_teacher(path, 1), tiny_buffer.snapshots[1])


def test_truncated_and_mismatched_buffers(tmp_path, tiny_buffer):
    raw = save_buffer(tiny_buffer, tmp_path / "t.ddtb").read_bytes()
    (tmp_path / "short.ddtb").write_bytes(raw[:len(raw) // 2])
    with pytest.raises(TruncatedFileError) as exc:
        load_buffer(tmp_path / "short.ddtb")
    assert exc.value.offset == len(raw) // 2
    with pytest.raises(FormatError):
        load_buffer(tmp_path / "t.ddtb", expect_arch="convnet-d2-w16")


def test_start_sampling_bounds_and_uniformity(tiny_buffer):
    rng = np.random.default_rng(0)
    draws = [sample_start(tiny_buffer, 3, 1, rng) for _ in range(10_000)]
    epochs = np.array([d.epoch for d in draws])
    assert epochs.min() >= 0 and epochs.max() < 3
    assert {d.teacher for d in draws} == {0, 1}
    assert sps.chisquare(np.bincount(epochs, minlength=3)).pvalue > 1e-3


def test_start_sample_targets(tiny_buffer):
    s = sample_start(tiny_buffer, 2, 2, np.random.default_rng(1))
    assert torch.equal(s.target, tiny_buffer.snapshot(s.teacher, s.epoch + 2))
    z = sample_start(tiny_buffer, 2, 0, np.random.default_rng(1))
    assert torch.equal(z.start, z.target)


def test_start_bounds_exceeding_trajectory():
    with pytest.raises(ConfigError):
        check_start_bounds(epochs=4, max_start_epoch=4, teacher_epochs=1)


def test_digest_tracks_hyperparameters(tiny_blobs):
    train, _ = tiny_blobs
    spec = ArchSpec.parse("mlp-d2-w4").bind((8,), 3)
    a = training_digest(train, spec, TeacherConfig(lr=0.01), [1, 2])
    assert a != training_digest(train, spec, TeacherConfig(lr=0.02), [1, 2])
    assert a == training_digest(train, spec, TeacherConfig(lr=0.01), [1, 2])


def test_empty_training_split_rejected():
    empty = LabeledDataset(torch.zeros(0, 8), torch.zeros(0, dtype=torch.long), 3)
    with pytest.raises(StructuralError):
        train_teachers(empty, ArchSpec.parse("mlp-d2-w4"), TeacherConfig(num_teachers=1, epochs=1))


def test_worker_pool_matches_serial(tiny_blobs):
    train, _ = tiny_blobs
    spec = ArchSpec.parse("mlp-d2-w4").bind((8,), 3)
    serial = train_teachers(train, spec, TeacherConfig(num_teachers=2, epochs=2, batch_size=16), seeds=[5, 6])
    pooled = train_teachers(train, spec, TeacherConfig(num_teachers=2, epochs=2, batch_size=16, workers=2), seeds=[5, 6])
    assert np.array_equal(serial.snapshots, pooled.snapshots)
