"""Command-line interface: subcommands, output contract, exit codes."""

from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from blockdec.cli import main
from blockdec.experiment import load_markov

from test_experiment import write_experiment


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestRun:
    def test_run_prints_written_paths(self, tmp_path, capsys):
        exp = write_experiment(tmp_path)
        code, out, err = run_cli(capsys, "run", str(exp))
        assert code == 0
        lines = out.strip().splitlines()
        assert len(lines) == 3
        assert {l.rsplit("_", 1)[-1] for l in lines} == {
            "summary.csv", "aggregate.csv", "steps.jsonl"}

    def test_missing_experiment_is_config_error(self, tmp_path, capsys):
        code, _, err = run_cli(capsys, "run", str(tmp_path / "nope.json"))
        assert code == 1
        assert "error:" in err

    def test_bad_json_is_config_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{")
        code, _, err = run_cli(capsys, "run", str(bad))
        assert code == 1

    def test_reruns_byte_identical(self, tmp_path, capsys):
        exp = write_experiment(tmp_path)
        run_cli(capsys, "run", str(exp))
        first = {p.name: p.read_bytes() for p in (tmp_path / "out").iterdir()}
        run_cli(capsys, "run", str(exp))
        second = {p.name: p.read_bytes() for p in (tmp_path / "out").iterdir()}
        assert first == second

    def test_output_dir_flag(self, tmp_path, capsys):
        exp = write_experiment(tmp_path)
        code, out, _ = run_cli(capsys, "run", str(exp),
                               "--output-dir", str(tmp_path / "alt"))
        assert code == 0
        assert (tmp_path / "alt" / "t_summary.csv").exists()


class TestSweep:
    def test_sweep_expands_one_parameter(self, tmp_path, capsys):
        exp = write_experiment(tmp_path)
        code, out, _ = run_cli(capsys, "sweep", str(exp), "--param", "tau",
                               "--values", "0.5,0.7,0.9")
        assert code == 0
        agg = tmp_path / "out" / "t_sweep_tau_aggregate.csv"
        assert agg.exists()
        with open(agg) as fh:
            rows = list(csv.DictReader(fh))
        assert [row["tau"] for row in rows] == ["0.5", "0.7", "0.9"]

    def test_unsweepable_param_rejected(self, tmp_path, capsys):
        exp = write_experiment(tmp_path)
        code, _, err = run_cli(capsys, "sweep", str(exp), "--param",
                               "algorithm", "--values", "static")
        assert code == 1

    def test_invalid_value_rejected(self, tmp_path, capsys):
        exp = write_experiment(tmp_path)
        code, _, err = run_cli(capsys, "sweep", str(exp), "--param", "tau",
                               "--values", "0.5,2.0")
        assert code == 1
        assert "tau" in err

    def test_grid_index_out_of_range(self, tmp_path, capsys):
        exp = write_experiment(tmp_path)
        code, _, _ = run_cli(capsys, "sweep", str(exp), "--param", "tau",
                             "--values", "0.5", "--grid-index", "9")
        assert code == 1


class TestFitMarkov:
    def test_fit_and_reload(self, tmp_path, capsys):
        corpus = tmp_path / "c.txt"
        corpus.write_text("abcabcabc")
        out = tmp_path / "model.json"
        code, stdout, _ = run_cli(capsys, "fit-markov", "--corpus", str(corpus),
                                  "--order", "1", "--smoothing", "0.01",
                                  "--out", str(out))
        assert code == 0
        assert str(out) in stdout
        model = load_markov(out)
        assert model.order == 1
        assert int(np.argmax(model.distribution((0,)))) == 1

    def test_whitespace_tokenization_flag(self, tmp_path, capsys):
        corpus = tmp_path / "c.txt"
        corpus.write_text("0 1 0 1 0 1\n")
        out = tmp_path / "model.json"
        code, _, _ = run_cli(capsys, "fit-markov", "--corpus", str(corpus),
                             "--tokenization", "whitespace_ints",
                             "--out", str(out))
        assert code == 0
        assert load_markov(out).vocab.size == 2

    def test_missing_corpus_is_config_error(self, tmp_path, capsys):
        code, _, err = run_cli(capsys, "fit-markov", "--corpus",
                               str(tmp_path / "nope.txt"),
                               "--out", str(tmp_path / "m.json"))
        assert code == 1


FIXTURE = """\
# two confident blocks
0 0 0 0.95 1
0 0 1 0.95 2
0 0 2 0.95 3
0 0 3 0.95 4
1 0 0 0.50 5
1 0 1 0.40 6
1 0 2 0.30 7
1 0 3 0.20 0
1 1 1 0.60 6
1 1 2 0.55 7
1 1 3 0.50 0
1 2 2 0.70 7
1 2 3 0.65 0
1 3 3 0.80 0
"""


class TestReplay:
    def write_fixture(self, tmp_path):
        path = tmp_path / "script.txt"
        path.write_text(FIXTURE)
        return path

    def test_trace_lines_and_metrics(self, tmp_path, capsys):
        fixture = self.write_fixture(tmp_path)
        code, out, _ = run_cli(
            capsys, "replay", "--fixture", str(fixture), "--vocab-size", "8",
            "--algorithm", "dynamic", "--tau", "0.9", "--block-size", "4",
            "--max-new-tokens", "8")
        assert code == 0
        lines = out.strip().splitlines()
        assert lines[0] == ("block=0 step=0 threshold=0.900000 fallback=no "
                            "positions=[0, 1, 2, 3] "
                            "confidences=[0.950000,0.950000,0.950000,0.950000]")
        # block 1 never clears tau, so it falls back one position at a time
        assert lines[1].startswith("block=1 step=0 threshold=0.900000 "
                                   "fallback=yes positions=[0]")
        assert lines[-2] == "stop=max_length output=[1, 2, 3, 4, 5, 6, 7, 0]"
        assert lines[-1].startswith("tpf=1.6")

    def test_missing_entry_is_runtime_fault(self, tmp_path, capsys):
        path = tmp_path / "script.txt"
        path.write_text("0 0 0 0.95 1\n0 0 1 0.95 2\n")
        code, _, err = run_cli(
            capsys, "replay", "--fixture", str(path), "--vocab-size", "8",
            "--algorithm", "dynamic", "--tau", "0.5", "--block-size", "4",
            "--max-new-tokens", "4")
        assert code == 2
        assert "fault:" in err

    def test_malformed_fixture_is_runtime_fault(self, tmp_path, capsys):
        path = tmp_path / "script.txt"
        path.write_text("0 0 0.95 1\n")
        code, _, err = run_cli(
            capsys, "replay", "--fixture", str(path), "--vocab-size", "8",
            "--algorithm", "dynamic", "--tau", "0.5")
        assert code == 2
        assert "line 1" in err

    def test_static_replay_with_prompt(self, tmp_path, capsys):
        # steps=2 over a block of 2 commits one position per step
        path = tmp_path / "script.txt"
        path.write_text("0 0 0 0.9 3\n0 0 1 0.8 4\n0 1 1 0.6 4\n")
        code, out, _ = run_cli(
            capsys, "replay", "--fixture", str(path), "--vocab-size", "8",
            "--prompt", "1,2", "--algorithm", "static", "--steps", "2",
            "--block-size", "2", "--max-new-tokens", "2")
        assert code == 0
        assert "stop=max_length output=[3, 4]" in out

    def test_bad_config_is_config_error(self, tmp_path, capsys):
        fixture = self.write_fixture(tmp_path)
        code, _, err = run_cli(
            capsys, "replay", "--fixture", str(fixture), "--vocab-size", "8",
            "--algorithm", "dynamic", "--tau", "7.0")
        assert code == 1
        assert "tau" in err
