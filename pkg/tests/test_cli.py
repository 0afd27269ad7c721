import json
import subprocess
import sys

import pytest

from cfrnet import cli
from cfrnet.tensor import Conv2d

TINY = dict(image_size=32, min_height=8, max_height=16, n_train=8, n_test=4, epochs=1, batch_size=4,
            channels=8, stem_widths=[4, 8], warmup_steps=2, lr_decay_epoch=None)


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({**TINY, "data_dir": str(tmp_path / "data"), "out_dir": str(tmp_path / "run")}))
    return p


@pytest.mark.parametrize("argv", [[], ["fly"], ["train", "--loops", "x"], ["train", "--loops", "1,2"],
                                  ["ablate", "--loops", "-1"], ["train", "--bogus"]])
def test_usage_errors_exit_1(argv, capsys, tiny_config):
    if argv[:1] == ["train"] and argv[1:2] == ["--loops"]:
        argv = argv + ["--config", str(tiny_config)]
    assert cli.main(argv) == 1
    assert "usage error" in capsys.readouterr().err


def test_unknown_config_key_exits_1(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"epocs": 3}))
    assert cli.main(["train", "--config", str(p)]) == 1
    assert "epocs" in capsys.readouterr().err


def test_missing_run_dir_exits_2(tmp_path, capsys):
    assert cli.main(["eval", "--out", str(tmp_path / "nothing")]) == 2
    assert "config.json" in capsys.readouterr().err


def test_worker_cap_env(monkeypatch):
    monkeypatch.delenv("CFR_THREADS", raising=False)
    assert cli.worker_cap(3) == 3
    monkeypatch.setenv("CFR_THREADS", "2")
    assert cli.worker_cap(8) == 2
    monkeypatch.setenv("CFR_THREADS", "zero")
    with pytest.raises(cli.UsageError):
        cli.worker_cap(1)


def _digest(out):
    return [l for l in out.splitlines() if l.startswith("sha256:")][0]


def test_gen_data_is_deterministic(tiny_config, tmp_path, capsys):
    assert cli.main(["gen-data", "--config", str(tiny_config), "--seed", "3", "--out", str(tmp_path / "a")]) == 0
    first = _digest(capsys.readouterr().out)
    assert cli.main(["gen-data", "--config", str(tiny_config), "--seed", "3", "--out", str(tmp_path / "b")]) == 0
    assert _digest(capsys.readouterr().out) == first
    assert cli.main(["gen-data", "--config", str(tiny_config), "--seed", "4", "--out", str(tmp_path / "c")]) == 0
    assert _digest(capsys.readouterr().out) != first


def test_gen_data_into_missing_parent_exits_2(tiny_config, tmp_path):
    assert cli.main(["gen-data", "--config", str(tiny_config), "--out", str(tmp_path / "x" / "y")]) == 2


def test_train_then_eval(tiny_config, tmp_path, capsys):
    assert cli.main(["gen-data", "--config", str(tiny_config)]) == 0
    assert cli.main(["train", "--config", str(tiny_config), "--loops", "2"]) == 0
    assert "checkpoint:" in capsys.readouterr().out
    run = tmp_path / "run"
    assert cli.main(["eval", "--out", str(run), "--masks", "--timing"]) == 0
    report = json.loads((run / "report.json").read_text())
    assert report["label"] == "CFR_2" and len(report["dice_per_loop"]) == 2
    assert set(report["timing_per_loop_s"]) == {"1", "2"}
    assert (run / "detections.csv").read_text().startswith("image_id,class,")
    assert len(list((run / "masks").glob("*.pgm"))) == 4 * 2 * 2
    assert "mAP" in (run / "report.txt").read_text()
    # fewer loops at inference than trained
    assert cli.main(["eval", "--out", str(run), "--loops", "1"]) == 0
    assert len(json.loads((run / "report.json").read_text())["dice_per_loop"]) == 1


def test_ablate_table_and_absent_cells(tiny_config, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("CFR_THREADS", "1")
    real = cli.run_cell

    def flaky(cfg_dict, cell_dir):
        if cfg_dict["loops"] == 1 and cfg_dict["seed"] == 1:
            raise RuntimeError("injected")
        return real(cfg_dict, cell_dir)

    monkeypatch.setattr(cli, "run_cell", flaky)
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--config", str(tiny_config), "--loops", "0,1", "--seeds", "2",
                     "--out", str(out)]) == 0
    lines = (out / "ablation.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["row", "seed", "miss_rate", "mAP", "DICE_1"]
    assert [l.split("\t")[:2] for l in lines[1:]] == [
        ["Baseline", "mean"], ["Baseline", "0"], ["Baseline", "1"], ["CFR_1", "mean"], ["CFR_1", "0"], ["CFR_1", "1"]]
    assert lines[-1].split("\t")[2:] == ["absent", "absent", "absent"]
    summary = json.loads((out / "ablation.json").read_text())
    rows = {r["label"]: r for r in summary["rows"]}
    assert rows["CFR_1"]["completed"] == 1 and rows["Baseline"]["completed"] == 2
    assert "absent" in capsys.readouterr().err


def test_aggregate_means():
    cell = lambda m, mr, d: {"mAP": m, "log_average_miss_rate": mr, "dice_per_loop": d}
    cells = {(2, 0): cell(0.5, 0.2, [0.6, 0.8]), (2, 1): cell(0.7, None, [0.8, 1.0]), (2, 2): None}
    (row,) = cli.aggregate([2], [0, 1, 2], cells)
    assert row["completed"] == 2
    assert row["mAP"] == pytest.approx(0.6)
    assert row["miss_rate"] == pytest.approx(0.2)
    assert row["dice"] == pytest.approx([0.7, 0.9])
    table = cli.format_table([row], [0, 1, 2])
    assert table.splitlines()[1] == "CFR_2\tmean\t20.00\t60.00\t70.00\t90.00"


def test_gradcheck_reports_injected_conv_fault(monkeypatch, capsys):
    real = Conv2d.backward

    def skewed(self, grad):
        out = list(real(self, grad))
        out[1] = out[1] * 1.01
        return tuple(out)

    monkeypatch.setattr(Conv2d, "backward", skewed)
    assert cli.main(["gradcheck"]) == 2
    text = capsys.readouterr().out
    assert any("conv" in l and "FAIL" in l for l in text.splitlines())


@pytest.mark.slow
def test_gradcheck_passes_as_subprocess():
    proc = subprocess.run([sys.executable, "-m", "cfrnet.cli", "gradcheck"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stdout + proc.stderr
