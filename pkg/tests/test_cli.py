import json

import pytest

from specsparse.cli import main
from specsparse.headmap import load_mapping

DRAFT = {"layers": 1, "heads": 2, "head_dim": 4, "vocab": 32, "max_seq": 96, "page_size": 4}
TARGET = {"layers": 2, "heads": 2, "head_dim": 4, "vocab": 32, "max_seq": 96, "page_size": 4}


def write_config(path, **body):
    path.write_text(json.dumps(body))
    return path


@pytest.fixture
def workspace(tmp_path):
    """Traces + mapping built once through the CLI itself."""
    trace_cfg = write_config(
        tmp_path / "trace.json",
        seed=5,
        draft_model=dict(DRAFT),
        target_model=dict(TARGET),
        corpus={"samples": 3, "length": 20},
    )
    assert main(["trace", "--config", "trace.json", "--out", "traces",
                 "--workdir", str(tmp_path)]) == 0
    write_config(tmp_path / "map.json", traces="traces", k=4)
    assert main(["map", "--config", "map.json", "--out", "map_k4.json",
                 "--workdir", str(tmp_path)]) == 0
    return tmp_path


class TestTraceAndMap:
    def test_trace_writes_manifest(self, workspace):
        assert (workspace / "traces" / "manifest.json").exists()

    def test_map_output_is_valid_mapping(self, workspace):
        mapping = load_mapping(workspace / "map_k4.json")
        assert mapping.k == 4
        assert len(mapping.entries) == TARGET["layers"] * TARGET["heads"]

    def test_map_rerun_byte_identical(self, workspace):
        first = (workspace / "map_k4.json").read_bytes()
        assert main(["map", "--config", "map.json", "--out", "map_again.json",
                     "--workdir", str(workspace)]) == 0
        assert (workspace / "map_again.json").read_bytes() == first


class TestGenerate:
    def test_dense_with_oracle_check(self, workspace):
        write_config(
            workspace / "gen.json",
            seed=5,
            draft_model=dict(DRAFT),
            target_model=dict(TARGET),
            prompt={"synthetic": {"length": 6}},
            max_new=12,
            gamma=2,
            sparsity=None,
        )
        rc = main(["generate", "--config", "gen.json", "--out", "gen_report.json",
                   "--workdir", str(workspace), "--oracle-check"])
        assert rc == 0
        doc = json.loads((workspace / "gen_report.json").read_text())
        assert doc["result"]["oracle_check"]["matches_target_greedy"] is True
        assert len(doc["result"]["new_tokens"]) == 12
        assert doc["config"]["draft_model"]["seed"] == 6  # derived from master

    def test_sparse_generate_emits_event_log(self, workspace):
        write_config(
            workspace / "gen_sparse.json",
            seed=5,
            draft_model=dict(DRAFT),
            target_model=dict(TARGET),
            prompt={"synthetic": {"length": 6}},
            max_new=10,
            gamma=2,
            sparsity={"budget": 4},
            mappings=["map_k4.json"],
            event_log="events.jsonl",
        )
        rc = main(["generate", "--config", "gen_sparse.json", "--out", "gen_sparse.json.out",
                   "--workdir", str(workspace)])
        assert rc == 0
        lines = (workspace / "events.jsonl").read_text().splitlines()
        doc = json.loads((workspace / "gen_sparse.json.out").read_text())
        assert len(lines) == doc["result"]["stats"]["rounds"]
        assert doc["result"]["stats"]["masks_generated"] == doc["result"]["stats"]["rounds"]


class TestFractionBudget:
    def test_generate_with_fraction_budget(self, workspace):
        write_config(
            workspace / "gen_frac.json",
            seed=5,
            draft_model=dict(DRAFT),
            target_model=dict(TARGET),
            prompt={"synthetic": {"length": 6}},
            max_new=8,
            gamma=2,
            sparsity={"budget": 0.25},
            mappings=["map_k4.json"],
        )
        rc = main(["generate", "--config", "gen_frac.json", "--out", "gf.json",
                   "--workdir", str(workspace)])
        assert rc == 0
        doc = json.loads((workspace / "gf.json").read_text())
        assert doc["config"]["sparsity"]["budget"] == 0.25


class TestRecallCommand:
    def test_recall_report(self, workspace):
        write_config(
            workspace / "recall.json",
            seed=5,
            draft_model=dict(DRAFT),
            target_model=dict(TARGET),
            corpus={"samples": 2, "length": 20},
            mapping="map_k4.json",
            k=4,
        )
        rc = main(["recall", "--config", "recall.json", "--out", "recall_report.json",
                   "--workdir", str(workspace)])
        assert rc == 0
        doc = json.loads((workspace / "recall_report.json").read_text())
        assert 0.0 <= doc["result"]["recall"] <= 1.0
        assert "random_baseline" in doc["result"]

    def test_rerun_byte_identical(self, workspace):
        cfgp = write_config(
            workspace / "recall2.json",
            seed=5,
            draft_model=dict(DRAFT),
            target_model=dict(TARGET),
            corpus={"samples": 2, "length": 20},
            mapping="map_k4.json",
            k=4,
        )
        main(["recall", "--config", "recall2.json", "--out", "r1.json", "--workdir", str(workspace)])
        main(["recall", "--config", "recall2.json", "--out", "r2.json", "--workdir", str(workspace)])
        assert (workspace / "r1.json").read_bytes() == (workspace / "r2.json").read_bytes()

    def test_seed_override_changes_report(self, tmp_path):
        write_config(
            tmp_path / "osp.json",
            seed=5,
            model={"layers": 1, "heads": 2, "head_dim": 4, "vocab": 24, "max_seq": 16},
            eval_tokens={"synthetic": {"length": 16}},
            threshold=0.5,
        )
        main(["oracle-sparsity", "--config", "osp.json", "--out", "s5.json",
              "--workdir", str(tmp_path)])
        main(["oracle-sparsity", "--config", "osp.json", "--out", "s9.json",
              "--workdir", str(tmp_path), "--seed", "9"])
        a = json.loads((tmp_path / "s5.json").read_text())
        b = json.loads((tmp_path / "s9.json").read_text())
        assert a["config"]["seed"] == 5 and b["config"]["seed"] == 9
        assert a["config"]["model"]["seed"] != b["config"]["model"]["seed"]
        assert a["result"]["ppl_dense"] != b["result"]["ppl_dense"]


class TestOracleSparsityCommand:
    def test_report_shape(self, tmp_path):
        write_config(
            tmp_path / "osp.json",
            seed=2,
            model={"layers": 2, "heads": 2, "head_dim": 4, "vocab": 24, "max_seq": 16},
            eval_tokens={"synthetic": {"length": 16}},
            threshold=0.5,
        )
        rc = main(["oracle-sparsity", "--config", "osp.json", "--out", "osp_report.json",
                   "--workdir", str(tmp_path)])
        assert rc == 0
        doc = json.loads((tmp_path / "osp_report.json").read_text())
        assert len(doc["result"]["per_layer_ratio"]) == 2
        assert doc["result"]["threshold"] == 0.5


class TestPplCurveCommand:
    def test_csv_rows(self, workspace):
        write_config(
            workspace / "ppl.json",
            seed=5,
            draft_model=dict(DRAFT),
            target_model=dict(TARGET),
            corpus={"samples": 2, "length": 16},
            mappings=["map_k4.json"],
            budgets=[2, 16],
            scopes=["decode", "prefill-decode"],
        )
        rc = main(["ppl-curve", "--config", "ppl.json", "--out", "curve.csv",
                   "--workdir", str(workspace)])
        assert rc == 0
        lines = (workspace / "curve.csv").read_text().splitlines()
        assert lines[0].startswith("# ")
        assert lines[1] == "budget,scope,ppl,delta_ppl"
        assert len(lines) == 2 + 2 * 2

    def test_rerun_byte_identical(self, workspace):
        write_config(
            workspace / "ppl2.json",
            seed=5,
            draft_model=dict(DRAFT),
            target_model=dict(TARGET),
            corpus={"samples": 1, "length": 12},
            mappings=["map_k4.json"],
            budgets=[2],
            scopes=["decode"],
        )
        main(["ppl-curve", "--config", "ppl2.json", "--out", "c1.csv", "--workdir", str(workspace)])
        main(["ppl-curve", "--config", "ppl2.json", "--out", "c2.csv", "--workdir", str(workspace)])
        assert (workspace / "c1.csv").read_bytes() == (workspace / "c2.csv").read_bytes()


class TestSimulateOffloadCommand:
    def test_pipeline_to_csv(self, workspace):
        write_config(
            workspace / "gen_ev.json",
            seed=5,
            draft_model=dict(DRAFT),
            target_model=dict(TARGET),
            prompt={"synthetic": {"length": 6}},
            max_new=10,
            gamma=2,
            sparsity={"budget": 4},
            mappings=["map_k4.json"],
            event_log="ev.jsonl",
        )
        assert main(["generate", "--config", "gen_ev.json", "--out", "g.json",
                     "--workdir", str(workspace)]) == 0
        write_config(
            workspace / "sim.json",
            events="ev.jsonl",
            offload={"page_size": 4, "head_dim": 4, "link_bandwidth": 16,
                     "per_layer_compute": 3},
        )
        rc = main(["simulate-offload", "--config", "sim.json", "--out", "sim.csv",
                   "--workdir", str(workspace)])
        assert rc == 0
        lines = (workspace / "sim.csv").read_text().splitlines()
        assert lines[1] == "step,strategy,compute,transfer,stall,elapsed"
        n_steps = len((workspace / "ev.jsonl").read_text().splitlines())
        assert len(lines) == 2 + 3 * n_steps


class TestErrorPaths:
    def test_missing_config_names_path(self, tmp_path, capsys):
        rc = main(["map", "--config", "nope.json", "--out", "x.json", "--workdir", str(tmp_path)])
        assert rc == 1
        assert "nope.json" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        rc = main(["frobnicate", "--config", "x", "--out", "y"])
        assert rc == 1

    def test_no_subcommand(self, capsys):
        assert main([]) == 1

    def test_contract_violation_exits_2(self, workspace):
        # mapping referencing draft heads the draft model lacks
        doc = json.loads((workspace / "map_k4.json").read_text())
        doc["entries"] = [[0, 0, 5, 5, 1]]
        (workspace / "broken_map.json").write_text(json.dumps(doc))
        write_config(
            workspace / "recall_broken.json",
            seed=5,
            draft_model=dict(DRAFT),
            target_model=dict(TARGET),
            corpus={"samples": 1, "length": 8},
            mapping="broken_map.json",
            k=4,
        )
        rc = main(["recall", "--config", "recall_broken.json", "--out", "rb.json",
                   "--workdir", str(workspace)])
        assert rc == 2

    def test_bad_model_config_is_input_error(self, tmp_path):
        write_config(
            tmp_path / "bad.json",
            seed=1,
            draft_model={"layers": 0, "heads": 1, "head_dim": 2, "vocab": 4, "max_seq": 4},
            target_model=dict(TARGET),
            corpus={"samples": 1, "length": 4},
        )
        rc = main(["trace", "--config", "bad.json", "--out", "t", "--workdir", str(tmp_path)])
        assert rc == 1
