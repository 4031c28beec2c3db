import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cotdyn.boolean_task import build_task
from cotdyn.cli import build_parser, main
from cotdyn.experiment import (
    MASKED,
    OUTPUT_ROOT_ENV,
    RunConfig,
    init_sign_pattern,
    ground_truth_matrix,
    read_grid_csv,
    run_experiment,
    verify_manifest,
)


def small(out, **kw):
    base = dict(kind="PARITY", d=8, k=8, trainer="rl", engine="exact", steps=2, out_dir=str(out))
    base.update(kw)
    return RunConfig(**base)


class TestConfig:
    @settings(max_examples=30)
    @given(
        st.sampled_from(["PARITY", "AND", "OR"]),
        st.sampled_from(["rl", "sft"]),
        st.sampled_from(["exact", "mc"]),
        st.one_of(st.none(), st.floats(0.01, 10)),
        st.integers(1, 20),
    )
    def test_round_trip(self, kind, trainer, engine, eta, steps):
        cfg = RunConfig(kind=kind, trainer=trainer, engine=engine, eta=eta, steps=steps)
        assert RunConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg

    def test_normalises_case(self):
        cfg = RunConfig(kind="and", trainer="SFT", engine="Exact")
        assert (cfg.kind, cfg.trainer, cfg.engine) == ("AND", "sft", "exact")

    @pytest.mark.parametrize("bad", [{"trainer": "ppo"}, {"engine": "gpu"}, {"steps": 0}, {"epsilon": 2.5}])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            RunConfig(**bad)

    def test_unknown_keys(self):
        with pytest.raises(ValueError, match="unknown"):
            RunConfig.from_json({"kind": "OR", "lr": 1.0})

    def test_default_eta(self):
        assert RunConfig(d=20, epsilon=0.05).resolved_eta == pytest.approx(np.log(18 * 1.95 / 0.2))


class TestGrid:
    def test_ground_truth_layout(self):
        task = build_task("PARITY", 4, 4, 0)
        cols, rows, cells = read_grid_csv(ground_truth_matrix(task))
        assert cols == ["y1_1", "y1_2", "y2_1"]
        assert rows == ["x1", "x2", "x3", "x4", "y1_1", "y1_2"]
        assert [c[0] for c in cells] == ["0.5", "0.5", "0.0", "0.0", MASKED, MASKED]
        assert [c[2] for c in cells] == [MASKED] * 4 + ["0.5", "0.5"]

    def test_columns_sum_to_one(self):
        task = build_task("AND", 20, 16, 3)
        _, _, cells = read_grid_csv(ground_truth_matrix(task))
        for c in range(15):
            assert sum(float(r[c]) for r in cells if r[c] != MASKED) == pytest.approx(1.0)

    def test_sign_pattern(self):
        task = build_task("OR", 8, 8, 0)
        pattern = init_sign_pattern(task)
        assert np.all(pattern[2] == 0)
        assert sorted(np.flatnonzero(pattern[0][0] == 1)) == list(task.children[0][0])


class TestRunExperiment:
    def test_rl_outputs(self, tmp_path):
        m = run_experiment(small(tmp_path))
        names = {p.name for p in tmp_path.iterdir()}
        assert {"task.json", "ground_truth.csv", "signs_step000.csv", "signs_step002.csv", "scores_final.csv",
                "weights_final.csv", "trace.json", "manifest.json", "timing.log"} <= names
        assert m.checks == {"init_sign_pattern": True} and m.passed
        assert verify_manifest(tmp_path)
        trace = json.loads((tmp_path / "trace.json").read_text())
        assert len(trace["steps"]) == 3 and "expected_reward" in trace["steps"][0]

    def test_sft_outputs(self, tmp_path):
        m = run_experiment(small(tmp_path, trainer="sft", steps=3))
        assert (tmp_path / "stepwise.json").exists()
        assert set(m.checks) == {"stepwise_support", "later_levels_frozen"}
        assert m.checks["later_levels_frozen"]
        assert "population_loss" in json.loads((tmp_path / "trace.json").read_text())["steps"][0]

    def test_tampering_detected(self, tmp_path):
        run_experiment(small(tmp_path))
        (tmp_path / "scores_final.csv").write_text("nope\n")
        assert not verify_manifest(tmp_path)

    def test_failure_marker(self, tmp_path):
        with pytest.raises(Exception):
            run_experiment(small(tmp_path, d=20, k=16, steps=1))  # exact engine refuses this size
        assert (tmp_path / ".failed").read_text().startswith("BudgetExceeded")
        run_experiment(small(tmp_path))
        assert not (tmp_path / ".failed").exists()

    def test_byte_identical_reruns(self, tmp_path):
        cfg = small(tmp_path, engine="mc", sample_count=5000, mc_seed=4)
        run_experiment(cfg)
        first = {p.name: p.read_bytes() for p in tmp_path.iterdir() if p.name != "timing.log"}
        run_experiment(cfg)
        second = {p.name: p.read_bytes() for p in tmp_path.iterdir() if p.name != "timing.log"}
        assert first == second

    def test_default_root_from_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
        run_experiment(RunConfig(kind="OR", d=8, k=4, engine="exact"))
        assert (tmp_path / "rl-or-d8-k4" / "manifest.json").exists()


class TestCli:
    @pytest.fixture(autouse=True)
    def root(self, tmp_path, monkeypatch):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
        return tmp_path

    def test_rl_train(self, root, capsys):
        assert main(["rl-train", "--d", "8", "--k", "8", "--engine", "exact", "--steps", "2"]) == 0
        assert (root / "rl-parity-d8-k8" / "trace.json").exists()

    def test_config_file_with_override(self, root, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"kind": "AND", "d": 8, "k": 4, "engine": "exact", "steps": 3}))
        out = root / "custom"
        assert main(["rl-train", "--config", str(cfg), "--steps", "1", "--out-dir", str(out)]) == 0
        assert json.loads((out / "manifest.json").read_text())["config"]["steps"] == 1

    @pytest.mark.parametrize("argv", [
        ["verify-closed-form", "--steps", "3"],
        ["fd-check"],
        ["check-separation"],
        ["abcd-report"],
        ["variance-final-reward"],
        ["ground-truth", "--d", "8", "--k", "8"],
    ])
    def test_passing_commands(self, argv, capsys):
        assert main(argv) == 0
        assert "FAIL" not in capsys.readouterr().out

    def test_level_stats_reports_failure(self, capsys):
        assert main(["level-stats"]) == 1
        out = capsys.readouterr().out
        assert "PASS t1_recursion_match" in out and "FAIL t2_recursion_match" in out

    def test_error_exit_code(self, capsys):
        assert main(["rl-train", "--d", "20", "--k", "16", "--engine", "exact"]) == 2

    def test_parser_rejects_unknown_kind(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["fd-check", "--kind", "XOR"])

    def test_accept_subset(self, root, capsys):
        assert main(["accept", "--only", "3"]) == 0
        assert "[PASS] criterion 3" in capsys.readouterr().out
        assert json.loads((root / "accept" / "accept.json").read_text())[0]["passed"]
