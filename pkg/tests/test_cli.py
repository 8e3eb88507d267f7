import json
import subprocess
import sys
from pathlib import Path

import pytest


def run_entry(*args, expect=0):
    code = "import sys; sys.argv = ['maskloop'] + %r; from maskloop.cli import entry; entry()" % (
        list(args),
    )
    proc = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True)
    assert proc.returncode == expect, proc.stderr + proc.stdout
    return proc


@pytest.fixture(scope="module")
def small_campaign(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    camp = root / "camp"
    run_entry("synth", "--out", str(data), "--count", "8", "--seed", "3")
    run_entry("import", "--manifest", str(data / "manifest.json"), "--campaign", str(camp))
    return camp


class TestSynthImport:
    def test_outputs_exist(self, small_campaign):
        assert (small_campaign / "manifest.json").exists()
        assert (small_campaign / "rejects.json").exists()
        doc = json.loads((small_campaign / "manifest.json").read_text())
        assert len(doc["instances"]) == 8
        assert all("gt_rle" in inst for inst in doc["instances"])

    def test_import_counts_match_fixture(self, small_campaign, capsys):
        doc = json.loads((small_campaign / "manifest.json").read_text())
        rejects = json.loads((small_campaign / "rejects.json").read_text())
        assert len(doc["instances"]) + len(rejects) == 8


class TestSimulate:
    def test_grid_rows_and_determinism(self, small_campaign):
        args = (
            "simulate", "--campaign", str(small_campaign),
            "--grid", "3x3", "--refiner", "healing-oracle",
            "--sigma", "0", "--min-side", "0", "--seed", "5",
        )
        run_entry(*args)
        grid_csv = small_campaign / "reports" / "grid.csv"
        first = grid_csv.read_bytes()
        lines = first.decode().strip().splitlines()
        assert len(lines) == 1 + 4  # header + rounds 0..3
        run_entry(*args)
        assert grid_csv.read_bytes() == first  # byte-identical reruns

    def test_sigma_sweep_monotone(self, small_campaign):
        finals = []
        for sigma in ("0", "3", "6"):
            run_entry(
                "simulate", "--campaign", str(small_campaign),
                "--grid", "4x3", "--refiner", "healing-oracle",
                "--sigma", sigma, "--min-side", "0", "--seed", "5",
            )
            rows = (small_campaign / "reports" / "grid.csv").read_text().strip().splitlines()
            finals.append(float(rows[-1].split(",")[3]))
        assert finals[0] >= finals[1] >= finals[2]

    def test_bad_grid_is_validation_error(self, small_campaign):
        proc = run_entry(
            "simulate", "--campaign", str(small_campaign), "--grid", "3by3", expect=1
        )
        assert "error" in proc.stderr


class TestRanker:
    def test_train_apply_report(self, small_campaign):
        run_entry(
            "simulate", "--campaign", str(small_campaign),
            "--grid", "4x3", "--refiner", "healing-oracle",
            "--sigma", "2", "--min-side", "4", "--seed", "9",
        )
        run_entry(
            "rank-train", "--campaign", str(small_campaign),
            "--run", "4x3", "--fraction", "0.5", "--trees", "20", "--seed", "1",
        )
        assert (small_campaign / "models" / "forest.json").exists()
        assert (small_campaign / "runs" / "4x3" / "features.csv").exists()
        run_entry("rank-apply", "--campaign", str(small_campaign), "--run", "4x3")
        scores = (small_campaign / "runs" / "4x3" / "scores.csv").read_text().splitlines()
        assert scores[0] == "instance,round,predicted_iou,true_iou"
        assert len(scores) > 1
        assert (small_campaign / "runs" / "4x3" / "ranking_curve.csv").exists()
        run_entry("report", "--campaign", str(small_campaign), "--run", "4x3")
        assert (small_campaign / "reports" / "4x3" / "report.json").exists()

    def test_rank_apply_without_model_fails_cleanly(self, tmp_path):
        camp = tmp_path / "c"
        camp.mkdir()
        proc = run_entry(
            "rank-apply", "--campaign", str(camp), "--run", "4x3", expect=1
        )
        assert "rank-train" in proc.stderr


class TestMisc:
    def test_help_lists_subcommands(self):
        proc = run_entry("--help")
        for cmd in ("synth", "import", "simulate", "serve", "advance-round",
                    "rank-train", "rank-apply", "report"):
            assert cmd in proc.stdout

    def test_unknown_flag_fails(self, small_campaign):
        run_entry("simulate", "--campaign", str(small_campaign), "--bogus", expect=1)

    def test_report_on_empty_campaign(self, tmp_path):
        camp = tmp_path / "c"
        (camp / "runs" / "x").mkdir(parents=True)
        proc = run_entry("report", "--campaign", str(camp), "--run", "x", expect=1)
        assert "no event log" in proc.stderr
