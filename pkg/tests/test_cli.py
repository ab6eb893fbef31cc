import pandas as pd
import pytest
import torch

from ddprune import cli
from ddprune.data import load_distilled

INI = """\
[run]
seed = 0
output_dir = {out}

[data]
source = blobs
classes = 3
per_class = 20
test_per_class = 10
image_shape = 1x8x8
separation = 1.0
zca_lambda = 0.1

[teacher]
arch = convnet-d1-w4
num_teachers = 2
epochs = 3
lr = 0.05
batch_size = 16

[distill]
steps = 3
student_steps = 2
teacher_epochs = 1
max_start_epoch = 2
ipc = 1
lr_images = 1.0
lr_alpha = 1e-5
batch_size = 16
epsilon = 0.1
prune_floor = 0.5

[eval]
seeds = 0,1
epochs = 2
baseline = true
"""


def _write(path, out):
    path.write_text(INI.format(out=out))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    out = root / "out"
    config = _write(root / "run.ini", out)
    assert cli.main(["train-teachers", "--config", str(config)]) == 0
    assert cli.main(["distill", "--config", str(config)]) == 0
    return config, out


def test_missing_config_is_usage_error(tmp_path, capsys):
    missing = tmp_path / "nope.ini"
    assert cli.main(["distill", "--config", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_unknown_key_is_usage_error(tmp_path):
    config = tmp_path / "bad.ini"
    config.write_text("[distill]\nepsilonn = 0.1\n")
    assert cli.main(["distill", "--config", str(config)]) == 2


def test_missing_subcommand_arguments_exit_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["distill"])
    assert exc.value.code == 2


def test_train_teachers_rerun_byte_identical(pipeline):
    config, out = pipeline
    first = (out / cli.BUFFER_FILE).read_bytes()
    assert cli.main(["train-teachers", "--config", str(config)]) == 0
    assert (out / cli.BUFFER_FILE).read_bytes() == first
    assert len(pd.read_csv(out / cli.TEACHER_SUMMARY_FILE)) == 2


def test_distill_rerun_byte_identical(pipeline):
    config, out = pipeline
    first = [(out / name).read_bytes() for name in (cli.DISTILLED_FILE, cli.DISTILL_REPORT_FILE)]
    assert cli.main(["distill", "--config", str(config)]) == 0
    assert [(out / name).read_bytes() for name in (cli.DISTILLED_FILE, cli.DISTILL_REPORT_FILE)] == first


@pytest.mark.parametrize("arch", ["convnet-d1-w8", "mlp-d2-w4", "mlp"])
def test_distill_rejects_buffer_of_another_arch(pipeline, tmp_path, arch):
    config, out = pipeline
    before = (out / cli.DISTILLED_FILE).read_bytes()
    other = tmp_path / "other.ini"
    other.write_text(config.read_text().replace("arch = convnet-d1-w4\n", f"arch = {arch}\n"))
    assert cli.main(["distill", "--config", str(other)]) == 2
    assert (out / cli.DISTILLED_FILE).read_bytes() == before


def test_distill_outputs(pipeline):
    _, out = pipeline
    report = pd.read_csv(out / cli.DISTILL_REPORT_FILE)
    assert list(report.columns) == ["t", "L", "u", "p", "floor_triggered", "alpha"] and len(report) == 3
    resolved = (out / "resolved-distill.ini").read_text()
    assert "epsilon = 0.1" in resolved and "prune_floor = 0.5" in resolved
    d = load_distilled(out / cli.DISTILLED_FILE)
    assert d.images.shape == (3, 1, 8, 8) and d.provenance.steps == 3


def test_zero_step_distill_emits_initialization(pipeline, tmp_path):
    config, out = pipeline
    text = config.read_text().replace("steps = 3\n", "steps = 0\n", 1).replace("[distill]\n", "[distill]\noutput = init.ddd\n")
    zero = tmp_path / "zero.ini"
    zero.write_text(text)
    assert cli.main(["distill", "--config", str(zero)]) == 0
    init = load_distilled(out / "init.ddd")
    assert init.provenance.steps == 0 and not torch.equal(init.images, load_distilled(out / cli.DISTILLED_FILE).images)


def test_eval_writes_table_with_baseline(pipeline):
    config, out = pipeline
    assert cli.main(["eval", "--config", str(config)]) == 0
    frame = pd.read_csv(out / cli.EVAL_CSV_FILE)
    assert frame["method"].tolist() == ["Distilled", "Random"] and (frame["n_seeds"] == 2).all()
    assert "convnet-d1-w4" in (out / cli.EVAL_TABLE_FILE).read_text()


def test_eval_rerun_byte_identical(pipeline):
    config, out = pipeline
    assert cli.main(["eval", "--config", str(config)]) == 0
    first = [(out / name).read_bytes() for name in (cli.EVAL_CSV_FILE, cli.EVAL_TABLE_FILE)]
    assert cli.main(["eval", "--config", str(config)]) == 0
    assert [(out / name).read_bytes() for name in (cli.EVAL_CSV_FILE, cli.EVAL_TABLE_FILE)] == first


def test_export_images_grid(pipeline, tmp_path):
    _, out = pipeline
    args = ["export-images", "--distilled", str(out / cli.DISTILLED_FILE), "--zca", str(out / cli.ZCA_FILE)]
    assert cli.main(args + ["--out", str(tmp_path / "a.pgm")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b.pgm")]) == 0
    raw = (tmp_path / "a.pgm").read_bytes()
    header = b"P5\n8 24\n255\n"
    assert raw.startswith(header) and len(raw) == len(header) + 8 * 24
    assert raw == (tmp_path / "b.pgm").read_bytes()


def test_export_with_missing_zca_is_usage_error(pipeline, tmp_path):
    _, out = pipeline
    code = cli.main(["export-images", "--distilled", str(out / cli.DISTILLED_FILE), "--out", str(tmp_path / "x.pgm"),
                     "--zca", str(tmp_path / "none.npz")])
    assert code == 2


def test_to_pixels_clamps():
    px = cli.to_pixels(torch.tensor([[[[-1.0, 0.5, 2.0]]]]))
    assert px.reshape(-1).tolist() == [0, 128, 255]


def test_output_dir_env_override(tmp_path, monkeypatch):
    config = _write(tmp_path / "run.ini", tmp_path / "ignored")
    monkeypatch.setenv(cli.OUTPUT_DIR_ENV, str(tmp_path / "env"))
    assert cli.load_config(config).output_dir == tmp_path / "env"
