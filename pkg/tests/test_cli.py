import subprocess
import sys

import numpy as np
import pytest

from optocomp import cli, data
from optocomp.metrics import COLUMNS
from optocomp.model import ModelConfig, build_model, save_weights


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth-data", "--out", str(d), "--override", "seconds=0.3", "--seed", "2", "--quiet"]) == 0
    return d


def _unity(path, device="cl1b", gain=1.0):
    w = build_model(ModelConfig("s6", device))
    w = w.replace(**{"out_fc.W": np.zeros((1, 2)), "out_fc.b": np.full(1, gain)})
    save_weights(w, path)
    return path


def test_synth_data_rows_match_grid(dataset):
    entries = data.read_manifest(dataset / "manifest.tsv")
    assert len(entries) == len(data.DESK_GRID) == 4
    assert entries[0].controls["ratio"] == 6.0


def test_synth_data_custom_grid_with_bypass(tmp_path):
    code = cli.main(["synth-data", "--out", str(tmp_path), "--quiet",
                     "--override", "seconds=0.1", "--override", "grid=-20,1,5,100;-10,4,1,50;-30,8,2,20"])
    assert code == 0
    entries = data.read_manifest(tmp_path / "manifest.tsv")
    assert len(entries) == 3 and entries[0].controls["ratio"] == 1.0
    # ratio 1 is a bypass; it lies outside the CL 1B knob range, so compare the files directly
    x, _ = data.load_wav(entries[0].input)
    y, _ = data.load_wav(entries[0].output)
    assert np.array_equal(x, y)


def test_process_with_unity_weights_is_identity(tmp_path, dataset):
    w = _unity(tmp_path / "unity.json")
    code = cli.main(["process", "--out", str(tmp_path), "--quiet", "--override", f"weights={w}",
                     "--override", f"input={dataset / 'input.wav'}", "--override", "output=y.wav",
                     "--override", "controls=threshold=-20;ratio=4;attack=5;release=0.1", "--override", "chunk=333"])
    assert code == 0
    x, _ = data.load_wav(dataset / "input.wav")
    y, _ = data.load_wav(tmp_path / "y.wav")
    assert np.array_equal(x, y)


def test_process_silence(tmp_path):
    w = build_model(ModelConfig("lstm", "la2a"), 3)
    save_weights(w, tmp_path / "w.json")
    data.save_wav(tmp_path / "s.wav", np.zeros(500))
    assert cli.main(["process", "--out", str(tmp_path), "--quiet", "--override", f"weights={tmp_path / 'w.json'}",
                     "--override", f"input={tmp_path / 's.wav'}", "--override", "output=o.wav",
                     "--override", "controls=peak_reduction=40;switch=0"]) == 0
    y, _ = data.load_wav(tmp_path / "o.wav")
    assert y.size == 500 and not np.any(y)


def test_process_rejects_other_device_controls(tmp_path, dataset):
    w = _unity(tmp_path / "unity.json", device="la2a")
    assert cli.main(["process", "--out", str(tmp_path), "--quiet", "--override", f"weights={w}",
                     "--override", f"input={dataset / 'input.wav'}", "--override", "output=y.wav",
                     "--override", "controls=threshold=-20;ratio=4;attack=5;release=0.1"]) == 2


def test_eval_of_zero_model_gives_unit_esr(tmp_path, dataset, capsys):
    w = _unity(tmp_path / "zero.json", gain=0.0)
    assert cli.main(["eval", "--out", str(tmp_path), "--quiet", "--override", f"manifest={dataset / 'manifest.tsv'}",
                     "--override", f"weights={w}"]) == 0
    rows = capsys.readouterr().out.splitlines()[1:]
    assert [float(r.split("\t")[3]) for r in rows] == [1.0] * 5


def test_eval_columns_and_zero_error(tmp_path, dataset, capsys):
    w = _unity(tmp_path / "unity.json")
    # a manifest whose target is its own input
    src = dataset / "input.wav"
    data.write_manifest(tmp_path / "self.tsv", [data.ManifestEntry(src, src, "cl1b", {"threshold": -20.0, "ratio": 4.0,
                                                                                      "attack": 5.0, "release": 0.1})])
    assert cli.main(["eval", "--out", str(tmp_path), "--quiet", "--override", f"manifest={tmp_path / 'self.tsv'}",
                     "--override", f"weights={w}"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split("\t") == ["recording", *COLUMNS]
    assert [float(v) for v in lines[1].split("\t")[1:]] == [0.0] * 6
    assert (tmp_path / "metrics.tsv").read_text().splitlines()[0] == lines[0]


def test_eval_reports_nonzero_error_on_compressed_targets(tmp_path, dataset, capsys):
    w = _unity(tmp_path / "unity.json")
    assert cli.main(["eval", "--out", str(tmp_path), "--quiet", "--override", f"manifest={dataset / 'manifest.tsv'}",
                     "--override", f"weights={w}", "--override", "segment=test"]) == 0
    rows = [line.split("\t") for line in capsys.readouterr().out.splitlines()[1:]]
    assert len(rows) == 5 and rows[-1][0] == "mean"
    assert any(float(r[3]) > 0 for r in rows)


def test_train_override_limits_epochs(tmp_path, dataset):
    code = cli.main(["train", "--out", str(tmp_path), "--quiet", "--override", f"manifest={dataset / 'manifest.tsv'}",
                     "--override", "max_epochs=2", "--override", "batch_size=16", "--override", "architecture=s4d"])
    assert code == 0
    rows = (tmp_path / "history.tsv").read_text().splitlines()
    assert rows[0] == "epoch\ttrain_loss\tval_loss\tlr" and 1 <= len(rows) - 1 <= 2
    assert (tmp_path / "best.weights.json").is_file()


def test_config_file_and_override_precedence(tmp_path):
    cfg = tmp_path / "c.conf"
    cfg.write_text("# model\narchitecture = lstm\ndevice = la2a\n")
    r = cli.resolve_config("flops", str(cfg), ["device=cl1b"], None)
    assert r["architecture"] == "lstm" and r["device"] == "cl1b"


def test_flops_prints_table(capsys):
    assert cli.main(["flops", "--override", "architecture=s6", "--override", "device=la2a"]) == 0
    out = capsys.readouterr().out
    assert "reference\t1242\t984" in out


@pytest.mark.parametrize("argv", [
    ["flops", "--override", "depth=3"],
    ["flops", "--override", "architecture=transformer"],
    ["flops", "--override", "nonsense"],
    ["flops", "--config", "/nonexistent/c.conf"],
    ["train", "--override", "max_epochs=two", "--override", "manifest=m.tsv"],
    ["process"],
])
def test_config_errors_exit_2(argv, tmp_path):
    assert cli.main(argv + ["--out", str(tmp_path), "--quiet"]) == 2


def test_missing_manifest_exits_3_and_names_path(tmp_path, capsys):
    missing = tmp_path / "nowhere.tsv"
    assert cli.main(["train", "--out", str(tmp_path), "--quiet", "--override", f"manifest={missing}"]) == 3
    assert str(missing) in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_training_exits_4(tmp_path, dataset):
    code = cli.main(["train", "--out", str(tmp_path), "--quiet", "--override", f"manifest={dataset / 'manifest.tsv'}",
                     "--override", "max_epochs=1", "--override", "batch_size=16", "--override", "lr0=1e300",
                     "--override", "clip_norm=1e300"])
    assert code == 4


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "optocomp.cli", "flops", "--out", str(tmp_path)], capture_output=True,
                       text=True)
    assert r.returncode == 0 and "network_total" in r.stdout
    r = subprocess.run([sys.executable, "-m", "optocomp.cli", "eval", "--out", str(tmp_path), "--override",
                        f"manifest={tmp_path / 'x.tsv'}"], capture_output=True, text=True)
    assert r.returncode == 3 and "x.tsv" in r.stderr
