import json
import os
import subprocess
import sys

import numpy as np
import pytest

from thermalgan.checkpoint import load_checkpoint
from thermalgan.cli import EXIT_IO, EXIT_OK, EXIT_USAGE, main
from thermalgan.gapfill import read_provenance

SMALL = ["--side", "16", "--width", "4"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth-data", "--out", str(out), "--n-subjects", "2", "--samples", "12", "--side", "16"]) == EXIT_OK
    return out


def train_args(data, out, *extra):
    return ["train", "--data", str(data), "--out", str(out), "--iterations", "3", *SMALL, *extra]


def test_synth_data_layout(data):
    assert (data / "index.tsv").exists()
    assert (data / "streams.tsv").exists()
    assert (data / "scene_config.txt").exists()
    run = json.loads((data / "run.json").read_text())
    assert run["command"] == "synth-data" and run["options"]["n_subjects"] == 2


def test_train_twice_gives_identical_checkpoints(data, tmp_path):
    for name in ("a", "b"):
        args = train_args(data, tmp_path / name, "--style", "stacked", "--arch", "pix2pix", "--seed", "7")
        assert main(args) == EXIT_OK
    a = (tmp_path / "a" / "checkpoint.tgck").read_bytes()
    b = (tmp_path / "b" / "checkpoint.tgck").read_bytes()
    assert a == b
    state = load_checkpoint(str(tmp_path / "a" / "checkpoint.tgck"))
    assert (state.config.style, state.config.seed, state.iteration) == ("stacked", 7, 3)
    losses = (tmp_path / "a" / "losses.tsv").read_text().splitlines()
    assert losses[0] == "iteration\td_loss\tg_adv\tg_l1" and len(losses) == 4


def test_config_file_with_flag_override(data, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# small run\narch=cyclegan\nseed=3\nresnet_width=4\nn_blocks=1\n")
    assert main(train_args(data, tmp_path / "o", "--config", str(cfg), "--seed", "9")) == EXIT_OK
    state = load_checkpoint(str(tmp_path / "o" / "checkpoint.tgck"))
    assert (state.config.arch, state.config.seed, state.config.resnet_width) == ("cyclegan", 9, 4)


def test_run_config_replays_the_run(data, tmp_path):
    assert main(train_args(data, tmp_path / "first", "--seed", "2", "--subject", "1")) == EXIT_OK
    replay = ["train", "--data", str(data), "--out", str(tmp_path / "second"), "--subject", "1",
              "--config", str(tmp_path / "first" / "run_config.txt")]
    assert main(replay) == EXIT_OK
    a = (tmp_path / "first" / "checkpoint.tgck").read_bytes()
    assert a == (tmp_path / "second" / "checkpoint.tgck").read_bytes()
    run = json.loads((tmp_path / "first" / "run.json").read_text())
    assert run["seed"] == 2 and run["options"]["subject"] == [1]
    assert len(run["inputs"]["manifest"]["sha256"]) == 64 and run["version"]


def test_evaluate_copy_oracle_is_zero(data, tmp_path):
    out = tmp_path / "ev"
    assert main(["evaluate", "--data", str(data), "--predictions", str(data), "--out", str(out)]) == EXIT_OK
    last = (out / "report.txt").read_text().splitlines()[-1].split("\t")
    assert last[0] == "all" and float(last[2]) == 0.0


def test_evaluate_checkpoint_and_saved_outputs(data, tmp_path):
    assert main(train_args(data, tmp_path / "m")) == EXIT_OK
    ck = str(tmp_path / "m" / "checkpoint.tgck")
    assert main(["evaluate", "--data", str(data), "--checkpoint", ck, "--out", str(tmp_path / "e"), "--save-outputs"]) == EXIT_OK
    assert main(["evaluate", "--data", str(data), "--predictions", str(tmp_path / "e" / "outputs"),
                 "--out", str(tmp_path / "r")]) == EXIT_OK
    a = np.loadtxt(tmp_path / "e" / "samples.tsv", skiprows=1)[:, 2]
    b = np.loadtxt(tmp_path / "r" / "samples.tsv", skiprows=1)[:, 2]
    assert np.max(np.abs(a - b)) <= 0.5 / 255 + 1e-6


def test_style_mismatch_aborts_without_output(data, tmp_path):
    assert main(train_args(data, tmp_path / "m")) == EXIT_OK
    out = tmp_path / "bad"
    code = main(["evaluate", "--data", str(data), "--checkpoint", str(tmp_path / "m" / "checkpoint.tgck"),
                 "--style", "stacked", "--out", str(out)])
    assert code == EXIT_USAGE
    assert not out.exists()
    assert not [p for p in os.listdir(tmp_path) if ".partial-" in p]


def test_fill_gaps_writes_provenance(data, tmp_path):
    assert main(train_args(data, tmp_path / "m")) == EXIT_OK
    out = tmp_path / "filled"
    code = main(["fill-gaps", "--streams", str(data), "--subject", "1",
                 "--checkpoint", str(tmp_path / "m" / "checkpoint.tgck"), "--out", str(out)])
    assert code == EXIT_OK
    ts, src, _, _ = read_provenance(str(out / "subject_01" / "provenance.tsv"))
    assert src[:5] == ["real", "synthetic", "synthetic", "synthetic", "synthetic"]
    assert len(ts) == 5 * 11 + 1


def test_fill_gaps_baseline_needs_no_checkpoint(data, tmp_path):
    out = tmp_path / "hold"
    assert main(["fill-gaps", "--streams", str(data), "--baseline", "hold_last", "--out", str(out)]) == EXIT_OK
    assert main(["fill-gaps", "--streams", str(data), "--out", str(tmp_path / "x")]) == EXIT_USAGE


@pytest.mark.parametrize(
    "argv,code",
    [
        (["train", "--data", "/nonexistent/data", "--out", "{tmp}/o"], EXIT_IO),
        (["train", "--data", "{data}", "--out", "{tmp}/o", "--style", "sideways"], EXIT_USAGE),
        (["train", "--data", "{data}", "--out", "{tmp}/o", "--config", "{tmp}/missing.cfg"], EXIT_IO),
        (["evaluate", "--data", "{data}", "--out", "{tmp}/o"], EXIT_USAGE),
        (["evaluate", "--data", "{data}", "--checkpoint", "{data}/index.tsv", "--out", "{tmp}/o"], EXIT_IO),
        (["frobnicate"], EXIT_USAGE),
        ([], EXIT_USAGE),
    ],
)
def test_exit_codes(data, tmp_path, argv, code):
    argv = [a.format(tmp=tmp_path, data=data) for a in argv]
    assert main(argv) == code
    assert not (tmp_path / "o").exists()


def test_unknown_config_key_is_usage_error(data, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("learning_rate=1\n")
    assert main(train_args(data, tmp_path / "o", "--config", str(cfg))) == EXIT_USAGE


def test_compare_writes_table(data, tmp_path):
    out = tmp_path / "cmp"
    code = main(["compare", "arch", "--data", str(data), "--out", str(out), "--subjects", "2", "--seeds", "1",
                 "--iterations", "2", *SMALL])
    assert code in (0, 3)
    rows = (out / "comparison.csv").read_text().splitlines()
    assert rows[0] == "condition,mean_l1,std,seeds,verdict" and len(rows) == 3


def test_console_script_runs_as_module():
    res = subprocess.run([sys.executable, "-m", "thermalgan.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "synth-data" in res.stdout
