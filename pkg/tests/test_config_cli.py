import json

import numpy as np
import pytest

from cilab import cli
from cilab.config import ExperimentConfig, config_hash, load_config, parse_config, render_config
from cilab.errors import ConfigError

TINY = """
[dataset]
train_per_class = 40
val_per_class = 20
dim = 8
[algorithm]
name = {name}
num_stages = 3
width = 12
feature_dim = 6
layers_per_stage = 1
branch_stage = 1
exemplars_per_class = 5
[schedule]
base_epochs = 2
incremental_epochs = 2
exploit_epochs = 2
batch_size = 32
[analysis]
retrain_epochs = 2
cka_batch = 32
cka_passes = 2
tsne_iterations = 100
tsne_perplexity = 10
"""


def write_cfg(tmp_path, name="naive", extra=""):
    p = tmp_path / f"{name}.ini"
    p.write_text(TINY.format(name=name) + extra)
    return p


def run_all(tmp_path, name, extra="", run_dir=None):
    cfg = write_cfg(tmp_path, name, extra)
    rd = run_dir or tmp_path / f"run-{name}"
    for verb in ("gen-data", "run", "analyze"):
        assert cli.main([verb, "--config", str(cfg), "--run-dir", str(rd), "--quiet"]) == 0
    return rd


# -- config --------------------------------------------------------------


def test_defaults_roundtrip():
    cfg = ExperimentConfig()
    text = render_config(cfg)
    assert parse_config(text) == cfg
    assert render_config(parse_config(text)) == text
    assert "radius = 4.0" in text and "name = naive" in text
    assert len(config_hash(cfg)) == 16


def test_partial_config_fills_defaults(tmp_path):
    cfg = load_config(write_cfg(tmp_path, "der"))
    assert cfg.algorithm.name == "der" and cfg.dataset.classes == 10
    assert cfg.hyper().base.epochs == 2 and cfg.hyper().exemplars_per_class == 5


@pytest.mark.parametrize("text", [
    "[dataset]\nradius = far\n",
    "[dataset]\ncolour = red\n",
    "[weather]\nx = 1\n",
    "[algorithm]\nname = magic\n",
    "[split]\nbase = 4\n",
    "[analysis]\nperturbation = blur:0.5\n",
    "[algorithm]\nbranch_stage = 9\n",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_perturbation_parsing():
    cfg = parse_config("[analysis]\nperturbation = default\n")
    assert len(cfg.perturbation_schedule()) == 5
    cfg = parse_config("[analysis]\nperturbation = blur:0.1, blur:0.2, impulse:0.1, contrast:0.3, gaussian_noise:1\n")
    assert cfg.perturbation_schedule()[0] == ("blur", 0.1)
    assert ExperimentConfig().perturbation_schedule() is None


def test_seed_override_changes_hash():
    cfg = ExperimentConfig()
    other = cfg.with_seed(3)
    assert other.dataset.seed == other.split.seed == other.schedule.seed == 3
    assert config_hash(other) != config_hash(cfg)


# -- cli -----------------------------------------------------------------


def test_gen_data_is_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["gen-data", "--config", str(cfg), "--run-dir", str(a), "--quiet"]) == 0
    assert cli.main(["gen-data", "--config", str(cfg), "--run-dir", str(b), "--quiet"]) == 0
    assert (a / "dataset.bin").read_bytes() == (b / "dataset.bin").read_bytes()
    data, header = cli.read_dataset(a / "dataset.bin")
    assert data.x_train.shape == (400, 8) and data.x_val.shape == (200, 8)
    assert sorted(header["split"]["class_order"]) == list(range(10))


def test_default_dataset_counts(tmp_path):
    assert cli.main(["gen-data", "--run-dir", str(tmp_path), "--quiet"]) == 0
    data, _ = cli.read_dataset(tmp_path / "dataset.bin")
    assert len(data.y_train) + len(data.y_val) == 10 * 600 and data.x_train.shape[1] == 32


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    cfg = write_cfg(tmp_path)
    assert cli.main(["gen-data", "--config", str(cfg), "--quiet"]) == 0
    (made,) = (tmp_path / "root").iterdir()
    assert made.name.startswith("naive-") and (made / "dataset.bin").exists()


def test_exploit_run_layout_and_reports(tmp_path):
    rd = run_all(tmp_path, "exploit")
    ckpts = sorted(p.name for p in rd.glob("*.ckpt"))
    assert ckpts == ["extractor.ckpt"] + [f"head_{i}.ckpt" for i in range(6)]
    lines = (rd / "report.csv").read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    header = lines[1].split(",")
    assert header == ["stage", "acc_full"] + [f"acc_subset_{i}" for i in range(6)] + ["delta", "avg_inc_acc", "macs"]
    deltas = [float(l.split(",")[header.index("delta")]) for l in lines[2:]]
    assert deltas == [0.0] * 6
    cka = [float(l.split(",")[1]) for l in (rd / "cka.csv").read_text().splitlines()[2:]]
    assert all(abs(v - 1) < 1e-10 for v in cka)
    summary = json.loads((rd / "summary.json").read_text())
    assert summary["acc_m0"] == float(lines[2].split(",")[1])
    assert summary["tsne"]["paired_shift"] == 0.0
    tsne = (rd / "tsne.csv").read_text().splitlines()
    assert tsne[1] == "x,y,class,source" and len(tsne) == 2 + summary["tsne"]["rows"]


def test_oracle_single_stage_one_checkpoint(tmp_path):
    extra = "[split]\nbase = 10\nsteps = 0\nper_step = 0\n"
    cfg = tmp_path / "o.ini"
    cfg.write_text(TINY.format(name="oracle").replace("[analysis]", extra + "[analysis]"))
    rd = tmp_path / "o"
    assert cli.main(["gen-data", "--config", str(cfg), "--run-dir", str(rd), "--quiet"]) == 0
    assert cli.main(["run", "--config", str(cfg), "--run-dir", str(rd), "--quiet"]) == 0
    assert [p.name for p in rd.glob("*.ckpt")] == ["stage_0.ckpt"]


def test_rerun_is_byte_identical(tmp_path):
    a = run_all(tmp_path, "pder", run_dir=tmp_path / "a")
    b = run_all(tmp_path, "pder", run_dir=tmp_path / "b")
    for name in ("report.csv", "cka.csv", "tsne.csv", "summary.json", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_analyze_refuses_other_config(tmp_path):
    rd = run_all(tmp_path, "naive")
    other = write_cfg(tmp_path, "naive", "")
    other.write_text(other.read_text().replace("retrain_epochs = 2", "retrain_epochs = 3"))
    assert cli.main(["analyze", "--config", str(other), "--run-dir", str(rd), "--quiet"]) == 3


def test_missing_checkpoint_is_integrity_error(tmp_path):
    rd = run_all(tmp_path, "naive")
    (rd / "stage_2.ckpt").unlink()
    cfg = tmp_path / "naive.ini"
    assert cli.main(["analyze", "--config", str(cfg), "--run-dir", str(rd), "--quiet"]) == 5


def test_run_without_dataset_is_io_error(tmp_path):
    cfg = write_cfg(tmp_path)
    assert cli.main(["run", "--config", str(cfg), "--run-dir", str(tmp_path / "none"), "--quiet"]) == 6


def test_bad_config_exit_code(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[dataset]\nradius = -1\n")
    assert cli.main(["gen-data", "--config", str(p), "--run-dir", str(tmp_path), "--quiet"]) == 3


def test_compare_table_and_banner(tmp_path, capsys):
    a = run_all(tmp_path, "naive")
    b = run_all(tmp_path, "der")
    capsys.readouterr()
    assert cli.main(["compare", str(a), str(b)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split() == ["method", "Acc(M'_0,D)", "Acc(M'_N,D)", "dM'_N", "Avg.Inc.Acc", "Acc(M_N,D)"]
    assert [l.split()[0] for l in out[1:]] == ["naive", "der"]
    c = run_all(tmp_path, "der", "", run_dir=tmp_path / "seed1")
    # different split seed -> banner
    cfg = write_cfg(tmp_path, "der")
    d = tmp_path / "s1"
    for verb in ("gen-data", "run", "analyze"):
        assert cli.main([verb, "--config", str(cfg), "--run-dir", str(d), "--seed-override", "1", "--quiet"]) == 0
    capsys.readouterr()
    assert cli.main(["compare", str(c), str(d)]) == 0
    assert capsys.readouterr().out.startswith("WARNING")
