import json

import numpy as np
import pytest

from esfr.cli import main
from esfr.harness import load_embeddings


@pytest.fixture
def data_path(tmp_path):
    path = tmp_path / "data.emb"
    rc = main([
        "synth", "--classes", "8", "--signal-dims", "3", "--noise-dims", "13",
        "--per-class", "30", "--spread", "1.0", "--noise-scale", "0.3",
        "--seed", "5", "--out", str(path),
    ])
    assert rc == 0
    return path


class TestSynth:
    def test_writes_loadable_file(self, data_path):
        data = load_embeddings(data_path)
        assert data.class_count == 8 and data.dim == 16 and len(data) == 240


class TestLid:
    def test_prints_mean_and_sum(self, data_path, capsys):
        assert main(["lid", "--data", str(data_path), "--m", "10"]) == 0
        out = capsys.readouterr().out
        assert "lid mean:" in out and "lid sum:" in out
        mean = float(out.split("lid mean:")[1].split()[0])
        total = float(out.split("lid sum:")[1].split()[0])
        assert total == pytest.approx(mean * 240, rel=1e-4)


class TestEval:
    def _run(self, data_path, out):
        return main([
            "eval", "--data", str(data_path), "--method", "nn", "--adapt", "esfr",
            "--n-way", "5", "--k-shot", "1", "--query", "3", "--tasks", "3",
            "--seed", "4", "--ensemble", "1", "--max-iter", "3", "--m", "5",
            "--out", str(out),
        ])

    def test_report_written_and_repeatable(self, data_path, tmp_path):
        a = tmp_path / "a.json"
        b = tmp_path / "b.json"
        assert self._run(data_path, a) == 0
        assert self._run(data_path, b) == 0
        assert a.read_bytes() == b.read_bytes()
        payload = json.loads(a.read_text())
        assert payload["method"] == "nn"
        assert payload["adapt"] == "esfr"
        assert payload["tasks"] == 3
        assert payload["query_profile"] == "3,3,3,3,3"
        assert 0.0 <= payload["mean_acc"] <= 100.0
        assert "failures" in payload and "ci95" in payload

    def test_query_profile_flag(self, data_path, tmp_path):
        out = tmp_path / "imb.json"
        rc = main([
            "eval", "--data", str(data_path), "--method", "cspn", "--adapt", "none",
            "--query-profile", "2,3,4,5,6", "--tasks", "2", "--seed", "1",
            "--out", str(out),
        ])
        assert rc == 0
        assert json.loads(out.read_text())["query_profile"] == "2,3,4,5,6"

    def test_semi_with_lambda(self, data_path, tmp_path):
        out = tmp_path / "semi.json"
        rc = main([
            "eval", "--data", str(data_path), "--method", "nn", "--adapt", "esfr-semi",
            "--lambda", "0.4", "--query", "2", "--tasks", "2", "--seed", "2",
            "--ensemble", "1", "--max-iter", "3", "--m", "5", "--out", str(out),
        ])
        assert rc == 0
        assert json.loads(out.read_text())["lambda"] == 0.4


class TestTrace:
    def test_writes_both_csvs(self, data_path, tmp_path):
        out = tmp_path / "curves.csv"
        rc = main([
            "trace", "--data", str(data_path), "--task-index", "0", "--query", "4",
            "--max-iter", "5", "--m", "5", "--probe-every", "2", "--dropout", "0.5",
            "--out", str(out),
        ])
        assert rc == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 5 + 2
        assert (tmp_path / "curves_nodropout.csv").exists()

    def test_hidden_tap(self, data_path, tmp_path):
        out = tmp_path / "hidden.csv"
        rc = main([
            "trace", "--data", str(data_path), "--task-index", "1", "--query", "4",
            "--max-iter", "3", "--m", "5", "--tap", "hidden", "--dropout", "0",
            "--out", str(out),
        ])
        assert rc == 0
        assert len(out.read_text().splitlines()) == 5


class TestCalibrate:
    def test_writes_preset(self, tmp_path, monkeypatch):
        out = tmp_path / "preset.cfg"
        rc = main(["calibrate", "--tasks", "8", "--out", str(out)])
        assert rc == 0
        preset = json.loads(out.read_text())
        assert 55.0 <= preset["baseline_nn_1shot_acc"] <= 75.0
        assert "noise_scale" in preset and "sweep" in preset
