import pytest
import torch

from ddprune.data import Provenance, init_distilled
from ddprune.errors import ConfigError, StructuralError
from ddprune.evaluate import (ArchResult, EvalConfig, cross_architecture_eval, evaluate_distilled, format_table,
                              full_dataset, random_baseline, reports_frame, train_from_scratch)
from ddprune.models import ArchSpec

CFG = EvalConfig(epochs=20, lr=0.05, batch_size=16, seeds=(0, 1))
ARCH = "mlp-d2-w4"


def _distilled(train, ipc=1):
    d = init_distilled(train, ipc, 0.05, 0)
    d.provenance = Provenance(config_hash="x", steps=0, arch=f"{ARCH}-in8-c3")
    return d


def test_zero_epochs_is_near_chance(tiny_blobs):
    train, test = tiny_blobs
    spec = ArchSpec.parse(ARCH).bind((8,), 3)
    accs = [train_from_scratch(spec, train, 0.05, 0, s, test)[1] for s in range(10)]
    assert abs(sum(accs) / len(accs) - 1 / 3) < 0.25


def test_same_seed_same_result(tiny_blobs):
    train, test = tiny_blobs
    spec = ArchSpec.parse(ARCH).bind((8,), 3)
    a = train_from_scratch(spec, train, 0.05, 3, 7, test)
    b = train_from_scratch(spec, train, 0.05, 3, 7, test)
    assert torch.equal(a[0], b[0]) and a[1] == b[1]


def test_full_data_upper_bounds_unoptimized_distilled(tiny_blobs):
    train, test = tiny_blobs
    full = full_dataset(train, test, [ARCH], CFG).rows[0]
    dist = evaluate_distilled(_distilled(train), test, ARCH, CFG).rows[0]
    assert full.mean >= dist.mean


def test_seed_lists_validated(tiny_blobs):
    train, test = tiny_blobs
    with pytest.raises(ConfigError):
        evaluate_distilled(_distilled(train), test, ARCH, CFG, seeds=[1, 1])
    with pytest.raises(ConfigError):
        evaluate_distilled(_distilled(train), test, ARCH, CFG, seeds=[1])


def test_std_zero_iff_all_equal():
    assert ArchResult("a", 0.1, (0, 1, 2), [0.5, 0.5, 0.5]).std == 0.0
    r = ArchResult("a", 0.1, (0, 1), [0.5, 0.7])
    assert r.std > 0 and abs(r.std - 0.1414213562) < 1e-9 and abs(r.mean - 0.6) < 1e-12


def test_report_digest_tracks_data_and_input_is_untouched(tiny_blobs):
    train, test = tiny_blobs
    d = _distilled(train)
    before = d.images.clone()
    a = evaluate_distilled(d, test, ARCH, CFG)
    assert torch.equal(d.images, before)
    d2 = d.clone()
    d2.images[0, 0] += 1.0
    assert evaluate_distilled(d2, test, ARCH, CFG).digest != a.digest


def test_cross_arch_single_spec_equals_evaluate(tiny_blobs):
    train, test = tiny_blobs
    d = _distilled(train)
    a = cross_architecture_eval(d, test, [ARCH], CFG).rows[0]
    b = evaluate_distilled(d, test, ARCH, CFG).rows[0]
    assert a.accuracies == b.accuracies


def test_generator_arch_uses_learned_lr(tiny_blobs):
    train, test = tiny_blobs
    d = _distilled(train)
    rep = cross_architecture_eval(d, test, [ARCH, "mlp-d3-w8"], CFG)
    assert rep.row(ARCH).lr == pytest.approx(float(d.alpha)) and rep.row("mlp-d3-w8").lr == CFG.lr
    assert [r.arch for r in rep.rows] == [ARCH, "mlp-d3-w8"]


def test_incompatible_arch_named_in_error(tiny_blobs):
    train, test = tiny_blobs
    with pytest.raises(StructuralError, match="convnet-d1-w4"):
        cross_architecture_eval(_distilled(train), test, [ARCH, "convnet-d1-w4"], CFG)


def test_random_baseline_with_every_example_equals_full(tiny_blobs):
    train, test = tiny_blobs
    rand = random_baseline(train, 30, test, [ARCH], CFG).rows[0]
    full = full_dataset(train, test, [ARCH], CFG).rows[0]
    assert rand.accuracies == full.accuracies


def test_random_baseline_beats_chance(tiny_blobs):
    train, test = tiny_blobs
    assert random_baseline(train, 1, test, [ARCH], CFG).rows[0].mean > 0.4


def test_table_and_frame(tiny_blobs):
    train, test = tiny_blobs
    reports = [evaluate_distilled(_distilled(train), test, ARCH, CFG), random_baseline(train, 1, test, ARCH, CFG)]
    table = format_table(reports)
    assert "Distilled" in table and "Random" in table and ARCH in table and "±" in table
    frame = reports_frame(reports)
    assert frame["method"].tolist() == ["Distilled", "Random"] and (frame["n_seeds"] == 2).all()
