from pathlib import Path

import pandas as pd
import pytest

from ddprune import cli
from ddprune.distill import SMOOTHING_WINDOW
from ddprune.teacher import check_start_bounds

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.ini"


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    with pytest.MonkeyPatch.context() as mp:
        mp.setenv(cli.OUTPUT_DIR_ENV, str(out))
        for command in ("train-teachers", "distill", "eval"):
            assert cli.main([command, "--config", str(DESK)]) == 0
    return out


def test_desk_config_segments_fit_and_student_steps_stay_below_teacher_epochs():
    cfg = cli.load_config(DESK)
    assert cfg.distill.student_steps < cfg.distill.teacher_epochs
    check_start_bounds(cfg.teacher.epochs, cfg.distill.max_start_epoch, cfg.distill.teacher_epochs)


@pytest.mark.slow
def test_desk_run_beats_random_selection(desk_run):
    loss = pd.read_csv(desk_run / cli.DISTILL_REPORT_FILE)["L"].rolling(SMOOTHING_WINDOW, min_periods=1).mean()
    assert loss.iloc[-1] < loss.iloc[SMOOTHING_WINDOW - 1]

    ev = pd.read_csv(desk_run / cli.EVAL_CSV_FILE)
    arch = ev[ev["method"] == "Distilled"]["arch"].iloc[0]
    pick = lambda method: float(ev[(ev["method"] == method) & (ev["arch"] == arch)]["mean"].iloc[0])
    assert pick("Distilled") - pick("Random") >= 0.05


@pytest.mark.slow
def test_desk_distilled_set_transfers_across_architectures(desk_run):
    ev = pd.read_csv(desk_run / cli.EVAL_CSV_FILE)
    dist = ev[ev["method"] == "Distilled"]
    assert dist["arch"].tolist() == ["convnet-d2-w16", "convnet-d3-w16", "mlp-d2-w64"]
    assert (dist["n_seeds"] == 5).all()
    assert (dist["mean"] > 1 / 3 + 3 * dist["std"]).all()
    table = (desk_run / cli.EVAL_TABLE_FILE).read_text()
    assert all(arch in table for arch in dist["arch"])
