import json

import numpy as np
import pytest

from asyncred.cli import main
from asyncred.experiments import (BudgetSpec, desk_cs_spec, load_pgm,
                                  trace_from_csv)


def write_spec(tmp_path, name="spec.json", **overrides):
    base = dict(solver="bc", budget=BudgetSpec(max_outer_iterations=12))
    base.update(overrides)
    spec = desk_cs_spec(**base)
    path = tmp_path / name
    path.write_text(spec.model_dump_json())
    return path


class TestRun:
    def test_success_writes_artifacts(self, tmp_path, capsys):
        spec = write_spec(tmp_path)
        out = tmp_path / "out"
        assert main(["run", str(spec), "-o", str(out)]) == 0
        assert {p.name for p in out.iterdir()} == {
            "spec.json", "trace.csv", "final.pgm", "report.json"}
        trace = trace_from_csv((out / "trace.csv").read_text())
        assert trace.records[0].norm_res == 1.0
        img = load_pgm((out / "final.pgm").read_bytes())
        assert img.height == 64
        report = json.loads((out / "report.json").read_text())
        assert report["t"] == 12 * 4

    def test_missing_spec_file(self, tmp_path):
        assert main(["run", str(tmp_path / "none.json"), "-o", str(tmp_path / "o")]) == 2

    def test_malformed_json(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["run", str(bad), "-o", str(tmp_path / "o")]) == 2

    def test_invalid_spec_fields(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"task": "cs"}))
        assert main(["run", str(bad), "-o", str(tmp_path / "o")]) == 2

    def test_divergent_gamma_exits_3(self, tmp_path):
        spec = write_spec(tmp_path, gamma=50.0,
                          budget=BudgetSpec(max_outer_iterations=5000))
        with pytest.warns(UserWarning):
            code = main(["run", str(spec), "-o", str(tmp_path / "o")])
        assert code == 3

    def test_refuses_nonempty_out_dir(self, tmp_path):
        spec = write_spec(tmp_path)
        out = tmp_path / "out"
        out.mkdir()
        (out / "existing.txt").write_text("keep me")
        assert main(["run", str(spec), "-o", str(out)]) == 2
        assert main(["run", str(spec), "-o", str(out), "--force"]) == 0

    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as err:
            main(["frobnicate"])
        assert err.value.code == 2


class TestVerify:
    def test_pass_exit_zero(self, capsys):
        assert main(["verify", "operators", "--trials", "25"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert any(line.startswith("PASS") for line in lines)

    def test_unknown_suite_exits_2(self):
        with pytest.raises(SystemExit) as err:
            main(["verify", "bogus"])
        assert err.value.code == 2


class TestBench:
    def test_table_and_header(self, tmp_path, capsys):
        spec = write_spec(tmp_path, solver="async-bg",
                          budget=BudgetSpec(max_outer_iterations=10))
        assert main(["bench", str(spec), "--workers", "1,2"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "workers,updates_per_sec,wall_ms_to_target_res"
        assert out[1].startswith("1,") and out[2].startswith("2,")

    def test_serial_spec_rejected(self, tmp_path):
        spec = write_spec(tmp_path, solver="bc")
        assert main(["bench", str(spec), "--workers", "1"]) == 2


class TestPhantomSynthReplay:
    def test_phantom(self, tmp_path):
        out = tmp_path / "p.pgm"
        assert main(["phantom", "--size", "32", "-o", str(out)]) == 0
        assert load_pgm(out.read_bytes()).width == 32

    def test_synth(self, tmp_path):
        spec = write_spec(tmp_path)
        out = tmp_path / "synth"
        assert main(["synth", str(spec), "-o", str(out)]) == 0
        names = {p.name for p in out.iterdir()}
        assert names == {"y.csv", "x_true.pgm", "meta.json"}
        meta = json.loads((out / "meta.json").read_text())
        assert meta["m"] == 4 * 716

    def test_replay(self, tmp_path):
        from asyncred.engine import StalenessSchedule

        spec = write_spec(tmp_path)
        sched_path = tmp_path / "sched.csv"
        with open(sched_path, "w") as fh:
            StalenessSchedule.random(24, b=4, lam=1, seed=1).to_csv(fh)
        out = tmp_path / "replayed"
        assert main(["replay", str(sched_path), str(spec), "-o", str(out)]) == 0
        assert (out / "trace.csv").exists()
        report = json.loads((out / "report.json").read_text())
        assert report["events"] == 24

    def test_replay_missing_schedule(self, tmp_path):
        spec = write_spec(tmp_path)
        assert main(["replay", str(tmp_path / "nope.csv"), str(spec),
                     "-o", str(tmp_path / "o")]) == 2


class TestSchema:
    def test_writes_schema_with_defaults(self, tmp_path):
        out = tmp_path / "spec.schema.json"
        assert main(["schema", "-o", str(out)]) == 0
        schema = json.loads(out.read_text())
        assert schema["properties"]["gamma"]["default"] == "auto"
        assert schema["properties"]["input_snr_db"]["default"] == 30.0
