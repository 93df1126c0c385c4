"""End-to-end command-line tests: build, run, compare, fixtures, and the
exit-code contract."""

import json

import numpy as np
import pytest

from firmslap.cli import (EXIT_CONFIG, EXIT_CONSTRUCTION, EXIT_OK,
                          EXIT_RUN_FAILURE, main, max_dare_residual)
from firmslap.executor import Scenario
from firmslap.graph import load_graph
from firmslap.world import save_environment
from helpers import small_world


@pytest.fixture(scope="module")
def cli_dir(tmp_path_factory):
    """A built 4-node roadmap over the small world plus a scenario file."""
    d = tmp_path_factory.mktemp("cli")
    save_environment(small_world(), d / "env.json")
    Scenario([1.5, 1.5, 0.0], [[4.5, 4.5, 0.0]]).save(d / "scn.json")
    rc = main(["build", str(d / "env.json"), "--out", str(d / "graph.json"),
               "--nodes", "4", "--k", "3", "--mc", "8", "--seed", "5",
               "--deterministic", "--report", str(d / "report.json")])
    assert rc == EXIT_OK
    return d


class TestBuild:
    def test_report_contents(self, cli_dir):
        report = json.loads((cli_dir / "report.json").read_text())
        assert report["nodes"] == 4 and report["edges"] == 8
        assert report["seed"] == 5
        assert report["dare_residual_max"] < 1e-8
        assert "built_at" not in report          # --deterministic
        g = load_graph(cli_dir / "graph.json")
        assert len(g.nodes) == 4 and len(g.edges) == 8
        assert max_dare_residual(g) == report["dare_residual_max"]

    def test_deterministic_builds_are_byte_identical(self, cli_dir, tmp_path):
        outs = []
        for sub in ("a", "b"):
            d = tmp_path / sub
            d.mkdir()
            rc = main(["build", str(cli_dir / "env.json"),
                       "--out", str(d / "graph.json"),
                       "--nodes", "4", "--k", "3", "--mc", "8", "--seed", "5",
                       "--deterministic", "--report", str(d / "report.json")])
            assert rc == EXIT_OK
            outs.append(d)
        assert (outs[0] / "graph.json").read_bytes() == \
               (outs[1] / "graph.json").read_bytes()
        reports = [json.loads((d / "report.json").read_text()) for d in outs]
        for r in reports:
            r.pop("graph")                        # the only differing fields
            r.pop("environment")
        assert reports[0] == reports[1]

    def test_worker_count_does_not_change_output(self, cli_dir, tmp_path):
        rc = main(["build", str(cli_dir / "env.json"),
                   "--out", str(tmp_path / "g2.json"),
                   "--nodes", "4", "--k", "3", "--mc", "8", "--seed", "5",
                   "--workers", "2", "--deterministic"])
        assert rc == EXIT_OK
        # The files differ only in the recorded worker count.
        a = json.loads((cli_dir / "graph.json").read_text())
        b = json.loads((tmp_path / "g2.json").read_text())
        assert a["config"].pop("workers") == 1
        assert b["config"].pop("workers") == 2
        assert a == b

    def test_too_few_nodes_is_a_construction_error(self, cli_dir, tmp_path,
                                                   capsys):
        rc = main(["build", str(cli_dir / "env.json"),
                   "--out", str(tmp_path / "g.json"), "--nodes", "1"])
        assert rc == EXIT_CONSTRUCTION
        assert "construction error" in capsys.readouterr().err


class TestRun:
    def test_success_run_with_logs(self, cli_dir, tmp_path, capsys):
        log = tmp_path / "run"
        rc = main(["run", str(cli_dir / "graph.json"), str(cli_dir / "scn.json"),
                   "--policy", "firm", "--seed", "1", "--log", str(log)])
        assert rc == EXIT_OK
        summary = json.loads(capsys.readouterr().out)
        assert summary["outcome"] == "success" and summary["policy"] == "firm"
        assert (tmp_path / "run.jsonl").exists()
        rows = np.loadtxt(tmp_path / "run.rows.csv", delimiter=",", skiprows=1)
        assert rows.shape[0] == summary["ticks"]

    def test_timeout_exits_nonzero_but_still_logs(self, cli_dir, tmp_path,
                                                  capsys):
        log = tmp_path / "short"
        rc = main(["run", str(cli_dir / "graph.json"), str(cli_dir / "scn.json"),
                   "--policy", "rollout", "--mc-online", "6",
                   "--max-ticks", "3", "--seed", "1", "--log", str(log)])
        assert rc == EXIT_RUN_FAILURE
        assert json.loads(capsys.readouterr().out)["outcome"] == "timeout"
        assert (tmp_path / "short.jsonl").exists()

    def test_same_seed_same_log_bytes(self, cli_dir, tmp_path):
        logs = []
        for sub in ("a", "b"):
            log = tmp_path / sub
            rc = main(["run", str(cli_dir / "graph.json"),
                       str(cli_dir / "scn.json"), "--policy", "rollout",
                       "--mc-online", "6", "--seed", "9", "--log", str(log)])
            assert rc == EXIT_OK
            logs.append(log)
        assert (tmp_path / "a.jsonl").read_bytes() == \
               (tmp_path / "b.jsonl").read_bytes()
        assert (tmp_path / "a.rows.csv").read_bytes() == \
               (tmp_path / "b.rows.csv").read_bytes()


class TestCompare:
    def test_emits_all_four_files(self, cli_dir, tmp_path, capsys):
        prefix = tmp_path / "cmp"
        rc = main(["compare", str(cli_dir / "graph.json"),
                   str(cli_dir / "scn.json"), "--runs", "2", "--seed0", "1",
                   "--mc-online", "6", "--out", str(prefix)])
        assert rc == EXIT_OK
        summary = (tmp_path / "cmp_summary.csv").read_text().splitlines()
        assert len(summary) == 3                  # header + firm + rollout
        assert summary[1].startswith("firm,2,") and \
               summary[2].startswith("rollout,2,")
        runs = (tmp_path / "cmp_runs.csv").read_text().splitlines()
        assert len(runs) == 1 + 4                 # 2 policies x 2 seeds
        for name in ("cmp_cost_curves.csv", "cmp_stab_curves.csv"):
            assert (tmp_path / name).exists()
        table = capsys.readouterr().out.splitlines()
        assert table[0].startswith("policy") and len(table) >= 3

    def test_empty_policy_list_is_config_error(self, cli_dir, tmp_path, capsys):
        rc = main(["compare", str(cli_dir / "graph.json"),
                   str(cli_dir / "scn.json"), "--runs", "1",
                   "--policies", ",", "--out", str(tmp_path / "x")])
        assert rc == EXIT_CONFIG
        assert "error" in capsys.readouterr().err


class TestFixturesCommand:
    def test_writes_every_reference_file(self, tmp_path, capsys):
        rc = main(["fixtures", "--out-dir", str(tmp_path / "fx")])
        assert rc == EXIT_OK
        printed = capsys.readouterr().out.splitlines()
        assert len(printed) == 9
        names = sorted(p.name for p in (tmp_path / "fx").iterdir())
        assert names == sorted([
            "office_21x21.env.json", "office_21x21.scenario.json",
            "two_doors.env.json", "two_doors.scenario.json",
            "kidnap_room.env.json", "kidnap_room.scenario.json",
            "empty_grid.env.json", "empty_grid.scenario.json",
            "two_doors_multi_event.scenario.json"])


class TestExitCodes:
    def test_missing_environment(self, tmp_path, capsys):
        rc = main(["build", str(tmp_path / "absent.json"),
                   "--out", str(tmp_path / "g.json")])
        assert rc == EXIT_CONFIG
        assert "error" in capsys.readouterr().err

    def test_malformed_json(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{]")
        rc = main(["build", str(bad), "--out", str(tmp_path / "g.json")])
        assert rc == EXIT_CONFIG
        capsys.readouterr()

    def test_wrong_graph_schema(self, cli_dir, tmp_path, capsys):
        fake = tmp_path / "fake_graph.json"
        fake.write_text(json.dumps({"schema": "unexpected/9"}))
        rc = main(["run", str(fake), str(cli_dir / "scn.json")])
        assert rc == EXIT_CONFIG
        capsys.readouterr()

    def test_wrong_scenario_schema(self, cli_dir, tmp_path, capsys):
        fake = tmp_path / "fake_scn.json"
        fake.write_text(json.dumps({"schema": "unexpected/9",
                                    "start": [0, 0, 0], "goals": [[1, 1, 0]]}))
        rc = main(["run", str(cli_dir / "graph.json"), str(fake)])
        assert rc == EXIT_CONFIG
        capsys.readouterr()

    def test_no_subcommand_is_a_usage_error(self, capsys):
        with pytest.raises(SystemExit):
            main([])
        capsys.readouterr()
