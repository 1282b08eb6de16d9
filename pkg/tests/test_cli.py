import json
import subprocess
import sys
import xml.etree.ElementTree as ET

import pytest

from routezero.cli import RESULTS_HEADER, main
from routezero.instance import load_instance

TINY_TRAIN = {
    "problem": "tsp",
    "n_nodes": 5,
    "total_episodes": 2,
    "stage_switch": 1,
    "planner": {"n_simulations": 6, "m_root": 4},
    "net": {
        "problem": "tsp",
        "embed_dim": 16,
        "n_heads": 2,
        "n_layers": 1,
        "ffn_dim": 32,
        "batch_size": 8,
        "learning_rate": 0.001,
    },
    "arena_size": 1,
    "arena_interval": 2,
    "train_steps_per_episode": 1,
    "checkpoint_interval": 2,
    "seed": 0,
}


@pytest.fixture
def trained_run(tmp_path):
    config = tmp_path / "smoke.json"
    config.write_text(json.dumps(TINY_TRAIN))
    run_dir = tmp_path / "run"
    assert main(["train", str(config), "--run-dir", str(run_dir)]) == 0
    return run_dir


class TestGen:
    def test_writes_named_tsp_files(self, tmp_path):
        assert main(["gen", "tsp", "--nodes", "5", "--count", "3", "--seed", "7", "--out", str(tmp_path)]) == 0
        names = sorted(p.name for p in tmp_path.glob("*.json"))
        assert names == [f"tsp_n5_seed{s}.json" for s in (7, 8, 9)]
        inst = load_instance(tmp_path / "tsp_n5_seed7.json")
        assert inst.n_nodes == 5

    def test_rerun_is_byte_identical(self, tmp_path):
        args = ["gen", "tsp", "--nodes", "4", "--count", "2", "--seed", "1", "--out", str(tmp_path)]
        main(args)
        first = {p.name: p.read_bytes() for p in tmp_path.glob("*.json")}
        main(args)
        second = {p.name: p.read_bytes() for p in tmp_path.glob("*.json")}
        assert first == second

    def test_evrp_naming_and_mode(self, tmp_path):
        assert (
            main(
                [
                    "gen", "evrp", "--customers", "3", "--stations", "2",
                    "--objective", "EM", "--count", "1", "--seed", "4", "--out", str(tmp_path),
                ]
            )
            == 0
        )
        path = tmp_path / "evrp_c3_s2_em_seed4.json"
        assert path.exists()
        inst = load_instance(path)
        assert inst.objective_mode == "EM"
        assert inst.n_customers == 3 and inst.n_stations == 2

    def test_bad_problem_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            main(["gen", "knapsack", "--out", str(tmp_path)])
        assert err.value.code == 1


class TestTrain:
    def test_smoke_run(self, trained_run):
        assert (trained_run / "checkpoint.npz").exists()
        rows = (trained_run / "metrics.csv").read_text().splitlines()
        assert len(rows) == 3

    def test_resume_exits_zero(self, tmp_path, trained_run):
        config = tmp_path / "smoke.json"
        assert main(["train", str(config), "--run-dir", str(trained_run), "--resume"]) == 0

    def test_seed_override_lands_in_config(self, tmp_path):
        config = tmp_path / "smoke.json"
        config.write_text(json.dumps(TINY_TRAIN))
        run_dir = tmp_path / "run"
        assert main(["train", str(config), "--run-dir", str(run_dir), "--seed", "5"]) == 0
        saved = json.loads((run_dir / "config.json").read_text())
        assert saved["seed"] == 5

    def test_run_root_env_var(self, tmp_path, monkeypatch):
        config = tmp_path / "smoke.json"
        config.write_text(json.dumps(TINY_TRAIN))
        monkeypatch.setenv("ROUTEZERO_RUN_ROOT", str(tmp_path / "root"))
        assert main(["train", str(config)]) == 0
        assert (tmp_path / "root" / "smoke" / "metrics.csv").exists()

    def test_missing_config_is_data_error(self, tmp_path, capsys):
        assert main(["train", str(tmp_path / "absent.json")]) == 2
        assert "error" in capsys.readouterr().err

    def test_garbage_json_is_data_error(self, tmp_path):
        config = tmp_path / "bad.json"
        config.write_text("{not json")
        assert main(["train", str(config)]) == 2

    def test_unknown_key_is_usage_error(self, tmp_path):
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({**TINY_TRAIN, "episodes": 3}))
        assert main(["train", str(config)]) == 1

    def test_bad_value_is_usage_error(self, tmp_path):
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({**TINY_TRAIN, "self_play_prob": 2.0}))
        assert main(["train", str(config)]) == 1


class TestEval:
    def gen_instances(self, tmp_path, n=2):
        inst_dir = tmp_path / "instances"
        main(["gen", "tsp", "--nodes", "5", "--count", str(n), "--seed", "0", "--out", str(inst_dir)])
        return inst_dir

    def read_rows(self, path):
        lines = path.read_text().splitlines()
        assert lines[0] == RESULTS_HEADER
        return [line.split(",") for line in lines[1:]]

    def test_greedy_rows_with_oracle_gap(self, tmp_path, trained_run):
        inst_dir = self.gen_instances(tmp_path)
        ckpt = trained_run / "checkpoint.npz"
        assert main(["eval", str(ckpt), str(inst_dir), "--mode", "greedy", "--workers", "1"]) == 0
        rows = self.read_rows(inst_dir / "results.csv")
        assert len(rows) == 2
        for name, method, obj, oracle, gap_pct, feasible in rows:
            assert name.endswith(".json") and method == "greedy"
            assert float(obj) >= float(oracle) - 1e-9
            assert float(gap_pct) >= -1e-9
            assert feasible == "True"

    def test_mcts_mode(self, tmp_path, trained_run):
        inst_dir = self.gen_instances(tmp_path, n=1)
        out = tmp_path / "mcts.csv"
        code = main(
            [
                "eval", str(trained_run / "checkpoint.npz"), str(inst_dir),
                "--mode", "mcts", "--budget", "8", "--m-root", "4",
                "--workers", "1", "--out", str(out),
            ]
        )
        assert code == 0
        rows = self.read_rows(out)
        assert rows[0][1] == "mcts" and rows[0][5] == "True"

    def test_parallel_matches_serial(self, tmp_path, trained_run):
        inst_dir = self.gen_instances(tmp_path, n=3)
        ckpt = trained_run / "checkpoint.npz"
        serial = tmp_path / "serial.csv"
        parallel = tmp_path / "parallel.csv"
        main(["eval", str(ckpt), str(inst_dir), "--workers", "1", "--out", str(serial)])
        main(["eval", str(ckpt), str(inst_dir), "--workers", "3", "--out", str(parallel)])
        assert serial.read_bytes() == parallel.read_bytes()

    def test_missing_checkpoint(self, tmp_path, capsys):
        inst_dir = self.gen_instances(tmp_path, n=1)
        assert main(["eval", str(tmp_path / "absent.npz"), str(inst_dir)]) == 2
        assert "not found" in capsys.readouterr().err

    def test_empty_instance_dir(self, tmp_path, trained_run):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["eval", str(trained_run / "checkpoint.npz"), str(empty)]) == 2


class TestPlot:
    def test_svg_from_run(self, tmp_path, trained_run):
        out = tmp_path / "chart.svg"
        assert main(["plot", str(trained_run / "metrics.csv"), str(out)]) == 0
        root = ET.fromstring(out.read_text())
        assert root.tag.endswith("svg")
        body = out.read_text()
        assert "polyline" in body
        assert "stage 2" in body, "switch marker expected when both stages appear"

    def test_missing_metrics(self, tmp_path):
        assert main(["plot", str(tmp_path / "absent.csv"), str(tmp_path / "o.svg")]) == 2

    def test_header_only_metrics(self, tmp_path):
        metrics = tmp_path / "m.csv"
        metrics.write_text("episode,stage,learner_obj,competitor_obj,z,policy_loss,value_loss,soc_per_customer\n")
        assert main(["plot", str(metrics), str(tmp_path / "o.svg")]) == 2

    def test_soc_panel_for_evrp_rows(self, tmp_path):
        metrics = tmp_path / "m.csv"
        rows = ["episode,stage,learner_obj,competitor_obj,z,policy_loss,value_loss,soc_per_customer"]
        for e in range(1, 6):
            rows.append(f"{e},1,{100 - e},{101 - e},1,0.5,0.5,{3.0 + 0.1 * e}")
        metrics.write_text("\n".join(rows) + "\n")
        out = tmp_path / "o.svg"
        assert main(["plot", str(metrics), str(out), "--window", "2"]) == 0
        assert "energy use" in out.read_text()


class TestUsage:
    def test_no_arguments(self):
        with pytest.raises(SystemExit) as err:
            main([])
        assert err.value.code == 1

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as err:
            main(["frobnicate"])
        assert err.value.code == 1

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "routezero.cli", "gen", "tsp", "--nodes", "4", "--count", "1",
             "--seed", "0", "--out", str(tmp_path)],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stderr
        assert "wrote 1 instance file(s)" in proc.stdout
