import csv
import struct
import subprocess
import sys

import numpy as np
import pytest

from gridcast.baselines_eval import baseline_predictor, evaluate
from gridcast.cli import main
from gridcast.griddata import load_movie
from gridcast.hypertune import hyperband_schedule

SMALL = ["--h", "6", "--w", "5", "--days", "4", "--seed", "1"]
FAST = ["--layers", "1", "--hidden", "4", "--history", "2", "--slots", "48,144"]


@pytest.fixture
def city(tmp_path):
    path = tmp_path / "city.gcf"
    assert main(["synth", *SMALL, "--out", str(path)]) == 0
    return path


def header(path):
    magic, _, H, W, C, T, _, _ = struct.unpack_from("<4sHIIHIQH", path.read_bytes())
    return magic, T, H, W, C


class TestSynth:
    def test_header_dims(self, tmp_path, capsys):
        out = tmp_path / "c.gcf"
        assert main(["synth", "--h", "8", "--w", "7", "--days", "2", "--out", str(out)]) == 0
        assert header(out) == (b"GCF1", 2 * 288, 8, 7, 3)
        assert "on_road_fraction" in capsys.readouterr().out

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a.gcf", tmp_path / "b.gcf"
        main(["synth", *SMALL, "--out", str(a)])
        main(["synth", *SMALL, "--out", str(b), "--city", "a"])
        assert a.read_bytes() == b.read_bytes()

    def test_zero_days_writes_nothing(self, tmp_path, capsys):
        out = tmp_path / "z.gcf"
        assert main(["synth", "--days", "0", "--out", str(out)]) == 2
        assert not out.exists()
        assert "n_days" in capsys.readouterr().err

    def test_resolved_header_on_stderr(self, tmp_path, capsys):
        main(["synth", *SMALL, "--out", str(tmp_path / "x.gcf")])
        err = capsys.readouterr().err
        assert "# days = 4" in err and "# noise = 0.08" in err

    def test_missing_out(self, capsys):
        assert main(["synth", "--days", "1"]) == 2
        assert "--out" in capsys.readouterr().err

    def test_bad_flag_value(self, tmp_path):
        assert main(["synth", "--days", "many", "--out", str(tmp_path / "x")]) == 2


class TestConfigFile:
    def test_file_then_flags(self, tmp_path, capsys):
        conf = tmp_path / "run.conf"
        conf.write_text("# small city\nh = 4\nw = 4\ndays = 1\nseed = 3  # trailing\n")
        out = tmp_path / "c.gcf"
        assert main(["synth", "--config", str(conf), "--w", "6", "--out", str(out)]) == 0
        _, T, H, W, _ = header(out)
        assert (T, H, W) == (288, 4, 6)

    def test_unknown_key(self, tmp_path, capsys):
        conf = tmp_path / "run.conf"
        conf.write_text("colour = blue\n")
        assert main(["synth", "--config", str(conf), "--out", str(tmp_path / "c.gcf")]) == 2
        assert "colour" in capsys.readouterr().err
        assert not (tmp_path / "c.gcf").exists()

    def test_missing_file(self, tmp_path):
        assert main(["synth", "--config", str(tmp_path / "nope"), "--out", "x"]) == 2


class TestTrain:
    def test_one_epoch_log(self, city, tmp_path):
        ckpt = tmp_path / "m.gcp"
        assert main(["train", "--data", str(city), *FAST, "--max-epochs", "1",
                     "--train-days", "0:2", "--val-days", "2:3", "--out", str(ckpt)]) == 0
        rows = list(csv.reader(open(str(ckpt) + ".log.csv")))
        assert rows[0] == ["epoch", "train_mse", "val_mse", "lr", "is_best"]
        assert len(rows) == 2 and ckpt.exists()

    def test_missing_data(self, tmp_path, capsys):
        missing = tmp_path / "absent.gcf"
        assert main(["train", "--data", str(missing), "--out", str(tmp_path / "m")]) == 2
        assert str(missing) in capsys.readouterr().err
        assert not (tmp_path / "m").exists()

    def test_corrupt_data(self, city, tmp_path, capsys):
        raw = bytearray(city.read_bytes())
        raw[0] = ord("X")
        city.write_bytes(bytes(raw))
        assert main(["train", "--data", str(city), "--out", str(tmp_path / "m")]) == 2
        assert "offset 0" in capsys.readouterr().err

    @pytest.mark.parametrize("flags", [
        ["--model", "cnn"], ["--biases", "LxH+Q"], ["--hour-bins", "7"], ["--lr", "-1"],
        ["--val-days", "3:9"], ["--slots", "1"], ["--kernel-size", "2"],
    ])
    def test_validation_errors(self, city, tmp_path, flags):
        out = tmp_path / "m.gcp"
        assert main(["train", "--data", str(city), *FAST, *flags, "--out", str(out)]) == 2
        assert not out.exists()


class TestEval:
    def test_baseline_rows(self, city, tmp_path, capsys):
        report = tmp_path / "r.csv"
        assert main(["eval", "--data", str(city), "--baseline", "zeros", "--baseline", "naive",
                     "--baseline", "seasonal", "--days", "0:4", "--slots", "48,144",
                     "--csv", str(report)]) == 0
        rows = list(csv.reader(report.open()))
        assert [r[0] for r in rows[1:]] == ["zeros", "naive", "seasonal"]
        md = capsys.readouterr().out.strip().splitlines()
        assert len(md) == 2 + 3

        ds = load_movie(city)
        zeros = evaluate(baseline_predictor("zeros"), ds, range(4), [48, 144])
        assert [float(x) for x in rows[1][1:4]] == pytest.approx(
            [round(v, 2) for v in zeros.values()], abs=1e-9)

    def test_overfit_checkpoint(self, tmp_path, capsys):
        data = tmp_path / "one.gcf"
        main(["synth", "--h", "4", "--w", "4", "--days", "1", "--seed", "2", "--out", str(data)])
        ckpt = tmp_path / "o.gcp"
        assert main(["train", "--data", str(data), "--layers", "1", "--hidden", "8",
                     "--history", "2", "--slots", "48", "--train-days", "0:1",
                     "--val-days", "0:1", "--day-fraction", "1", "--lr", "0.01",
                     "--max-epochs", "400", "--early-stop", "400", "--plateau-patience", "20",
                     "--out", str(ckpt)]) == 0
        report = tmp_path / "r.csv"
        assert main(["eval", "--data", str(data), "--checkpoint", f"trb={ckpt}",
                     "--days", "0:1", "--slots", "48", "--csv", str(report)]) == 0
        rows = list(csv.reader(report.open()))
        assert rows[1][0] == "trb"
        assert float(rows[1][-1]) < 0.01

    def test_nothing_to_do(self, city):
        assert main(["eval", "--data", str(city)]) == 2

    def test_unknown_baseline(self, city):
        assert main(["eval", "--data", str(city), "--baseline", "median"]) == 2

    def test_missing_checkpoint(self, city, tmp_path, capsys):
        assert main(["eval", "--data", str(city), "--checkpoint", str(tmp_path / "x.gcp")]) == 2
        assert "x.gcp" in capsys.readouterr().err


class TestTune:
    def tune(self, city, trace, *extra):
        return main(["tune", "--data", str(city), "--train-days", "0:2", "--val-days", "2:3",
                     "--slots", "48", "--layers-set", "1", "--hidden-set", "4",
                     "--history-set", "2", "--kernel-set", "1", "--trace", str(trace), *extra])

    def test_r1_single_trial(self, city, tmp_path):
        trace = tmp_path / "t.csv"
        assert self.tune(city, trace, "--R", "1") == 0
        assert len(trace.read_text().splitlines()) == 2
        best = (tmp_path / "t.csv.best.txt").read_text()
        assert "lr = " in best and "biases = " in best

    def test_row_count_and_determinism(self, city, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert self.tune(city, a, "--R", "3", "--seed", "4") == 0
        assert self.tune(city, b, "--R", "3", "--seed", "4", "--threads", "2") == 0
        assert a.read_bytes() == b.read_bytes()
        expected = sum(n for br in hyperband_schedule(3, 3) for n, _ in br.rungs)
        assert len(a.read_text().splitlines()) == 1 + expected

    def test_best_file_feeds_train(self, city, tmp_path):
        trace = tmp_path / "t.csv"
        self.tune(city, trace, "--R", "1")
        ckpt = tmp_path / "m.gcp"
        assert main(["train", "--config", str(tmp_path / "t.csv.best.txt"), "--data", str(city),
                     "--slots", "48", "--max-epochs", "1", "--out", str(ckpt)]) == 0

    def test_bad_schedule(self, city, tmp_path):
        trace = tmp_path / "t.csv"
        assert self.tune(city, trace, "--eta", "1") == 2
        assert not trace.exists()


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "gridcast", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "synth" in r.stdout


def test_no_command():
    assert main([]) == 2
