import json
import os
import sys

import pytest

from enerflow.cli import main
from enerflow.cost import CostFunction, model_energy, model_power, model_time
from enerflow.graph import load_graph, validate, equivalent, canonical_hash
from enerflow.profiling import load


def run_cli(*argv) -> int:
    return main(list(argv))


@pytest.fixture
def demo(tmp_path):
    """microbench demo graph + database emitted by `gen`."""
    out = tmp_path / "demo"
    assert run_cli("gen", "--model", "microbench", "--out", str(out)) == 0
    return {
        "graph": str(out / "microbench.json"),
        "db": str(out / "microbench_db.jsonl"),
        "dir": tmp_path,
    }


class TestGen:
    def test_chain_emits_valid_graph(self, tmp_path, capsys):
        assert run_cli("gen", "--model", "chain:3", "--out", str(tmp_path)) == 0
        path = tmp_path / "chain-3.json"
        assert path.exists()
        g = load_graph(path)
        assert validate(g) == []
        assert len(g.compute_nodes()) == 6

    def test_byte_identical_reruns(self, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        assert run_cli("gen", "--model", "toy-squeeze", "--out", str(d1)) == 0
        assert run_cli("gen", "--model", "toy-squeeze", "--out", str(d2)) == 0
        assert (d1 / "toy-squeeze.json").read_bytes() == (d2 / "toy-squeeze.json").read_bytes()

    def test_unknown_model_exit_1(self, tmp_path):
        assert run_cli("gen", "--model", "nope", "--out", str(tmp_path)) == 1


class TestOptimize:
    def test_energy_on_microbench_reports_bac(self, demo, capsys):
        out = str(demo["dir"] / "run")
        code = run_cli("optimize", "--graph", demo["graph"], "--db", demo["db"],
                       "--cost", "energy", "--rules", "none", "--profiler", "none",
                       "--out", out)
        assert code == 0
        report = json.loads((demo["dir"] / "run" / "report.json").read_text())
        labels = [entry["label"] for _, entry in sorted(report["assignment"].items(),
                                                        key=lambda kv: int(kv[0]))]
        assert labels == ["b", "a", "c"]
        assert report["optimized"]["energy_j_per_1000"] == pytest.approx(14.195, rel=1e-9)

    def test_identity_run_with_no_freedom(self, demo, tmp_path):
        # empty rule set and single-algorithm nodes: output graph == input
        graph = str(tmp_path / "chain.json")
        assert run_cli("gen", "--model", "chain:1", "--out", str(tmp_path)) == 0
        os.rename(tmp_path / "chain-1.json", graph)
        out = str(tmp_path / "run")
        code = run_cli("optimize", "--graph", graph, "--db", str(tmp_path / "db.jsonl"),
                       "--cost", "time", "--rules", "none",
                       "--profiler", "synthetic:seed=1", "--out", out)
        assert code == 0
        assert canonical_hash(load_graph(os.path.join(out, "optimized_graph.json"))) == \
            canonical_hash(load_graph(graph))

    def test_unattainable_constraint_exit_2(self, demo):
        code = run_cli("optimize", "--graph", demo["graph"], "--db", demo["db"],
                       "--cost", "constrained:time<=0.0001", "--rules", "none",
                       "--profiler", "none", "--out", str(demo["dir"] / "run2"))
        assert code == 2

    def test_missing_costs_exit_3(self, demo, tmp_path):
        code = run_cli("optimize", "--graph", demo["graph"],
                       "--db", str(tmp_path / "empty.jsonl"),
                       "--cost", "energy", "--profiler", "none",
                       "--out", str(tmp_path / "run"))
        assert code == 3

    def test_invalid_graph_exit_1(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"inputs": [], "nodes": [{"id": 0, "kind": "wat", "inputs": []}], "outputs": [0]}')
        assert run_cli("optimize", "--graph", str(bad), "--out", str(tmp_path / "o")) == 1

    def test_bad_cost_spec_exit_1(self, demo):
        assert run_cli("optimize", "--graph", demo["graph"], "--cost", "speed",
                       "--out", str(demo["dir"] / "x")) == 1

    def test_byte_identical_output_files(self, tmp_path):
        assert run_cli("gen", "--model", "toy-squeeze", "--out", str(tmp_path)) == 0
        graph = str(tmp_path / "toy-squeeze.json")
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            code = run_cli("optimize", "--graph", graph, "--db", str(tmp_path / f"{name}.jsonl"),
                           "--cost", "energy", "--alpha", "1.1", "--seed", "0",
                           "--profiler", "synthetic:seed=0", "--out", str(out), "--quiet")
            assert code == 0
            outs.append(out)
        for fname in ("optimized_graph.json", "assignment.json", "report.json",
                      "report.txt", "cost_db.jsonl"):
            b1 = (outs[0] / fname).read_bytes()
            b2 = (outs[1] / fname).read_bytes()
            assert b1 == b2, fname

    def test_report_metrics_recomputable_and_equivalent(self, tmp_path):
        assert run_cli("gen", "--model", "toy-resnet", "--out", str(tmp_path)) == 0
        graph_path = str(tmp_path / "toy-resnet.json")
        out = tmp_path / "run"
        code = run_cli("optimize", "--graph", graph_path, "--db", str(tmp_path / "db.jsonl"),
                       "--cost", "energy", "--profiler", "synthetic:seed=0",
                       "--out", str(out), "--quiet")
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        g_opt = load_graph(out / "optimized_graph.json")
        assert validate(g_opt) == []
        assignment = {int(k): v["alg"] for k, v in
                      json.loads((out / "assignment.json").read_text()).items()}
        db = load(out / "cost_db.jsonl")
        assert model_time(g_opt, assignment, db) == report["optimized"]["time_ms"]
        assert model_energy(g_opt, assignment, db) == report["optimized"]["energy_j_per_1000"]
        assert model_power(g_opt, assignment, db) == report["optimized"]["power_w"]
        # the emitted graph stays semantically equivalent to the origin
        assert equivalent(load_graph(graph_path), g_opt, 50, 1e-4)

    def test_quiet_suppresses_stdout(self, demo, capsys):
        code = run_cli("optimize", "--graph", demo["graph"], "--db", demo["db"],
                       "--cost", "energy", "--rules", "none", "--profiler", "none",
                       "--out", str(demo["dir"] / "q"), "--quiet")
        assert code == 0
        assert capsys.readouterr().out == ""


class TestProfile:
    def test_fresh_then_zero(self, tmp_path, capsys):
        assert run_cli("gen", "--model", "chain:2", "--out", str(tmp_path)) == 0
        graph = str(tmp_path / "chain-2.json")
        db = str(tmp_path / "db.jsonl")
        capsys.readouterr()
        assert run_cli("profile", "--graph", graph, "--db", db,
                       "--profiler", "synthetic:seed=0") == 0
        first = capsys.readouterr().out.strip()
        n = int(first.split()[0])
        # the printed count equals an independent census of applicable pairs
        from enerflow.graph import signatures
        from enerflow.profiling import synthetic_algorithms

        g = load_graph(graph)
        sigs = signatures(g)
        distinct = {sigs[node.id].text: sigs[node.id] for node in g.compute_nodes()}
        assert n == sum(len(synthetic_algorithms(s, 0)) for s in distinct.values())
        assert n > 0
        assert run_cli("profile", "--graph", graph, "--db", db,
                       "--profiler", "synthetic:seed=0") == 0
        assert capsys.readouterr().out.strip() == "0 new records"
        assert len(load(db)) == n

    def test_env_var_default_db(self, tmp_path, capsys, monkeypatch):
        assert run_cli("gen", "--model", "chain:1", "--out", str(tmp_path)) == 0
        db = tmp_path / "envdb.jsonl"
        monkeypatch.setenv("ENERFLOW_DB", str(db))
        assert run_cli("profile", "--graph", str(tmp_path / "chain-1.json"),
                       "--profiler", "synthetic:seed=0") == 0
        assert db.exists() and len(load(db)) > 0

    def test_external_failure_exit_4(self, tmp_path):
        assert run_cli("gen", "--model", "chain:1", "--out", str(tmp_path)) == 0
        stub = tmp_path / "fail.py"
        stub.write_text("import sys\nsys.exit(5)\n")
        code = run_cli("profile", "--graph", str(tmp_path / "chain-1.json"),
                       "--db", str(tmp_path / "db.jsonl"),
                       "--profiler", f"external:cmd={sys.executable} {stub} {{spec}} {{alg}}")
        assert code == 4

    def test_external_stub_success(self, tmp_path, capsys):
        assert run_cli("gen", "--model", "chain:1", "--out", str(tmp_path)) == 0
        stub = tmp_path / "ok.py"
        stub.write_text(
            "import json, sys\n"
            "spec = json.load(open(sys.argv[1]))\n"
            "print(json.dumps({'time_ms': 1.0 + spec['alg'], 'power_w': 50.0}))\n"
        )
        code = run_cli("profile", "--graph", str(tmp_path / "chain-1.json"),
                       "--db", str(tmp_path / "db.jsonl"),
                       "--profiler", f"external:cmd={sys.executable} {stub} {{spec}} {{alg}}")
        assert code == 0
        db = load(tmp_path / "db.jsonl")
        assert len(db) > 0


class TestCompare:
    def test_ablation_ordering(self, tmp_path, capsys):
        assert run_cli("gen", "--model", "toy-squeeze", "--out", str(tmp_path)) == 0
        out = tmp_path / "cmp"
        code = run_cli("compare", "--graph", str(tmp_path / "toy-squeeze.json"),
                       "--db", str(tmp_path / "db.jsonl"), "--cost", "energy",
                       "--alpha", "1.2", "--profiler", "synthetic:seed=0",
                       "--out", str(out), "--quiet")
        assert code == 0
        payload = json.loads((out / "compare.json").read_text())
        origin = payload["origin"]["cost"]
        inner_only = payload["inner search only"]["cost"]
        outer_only = payload["outer search only"]["cost"]
        both = payload["both inner and outer"]["cost"]
        assert both <= inner_only <= origin
        assert both <= outer_only <= origin

    def test_empty_rules_outer_equals_origin(self, demo, tmp_path):
        out = tmp_path / "cmp"
        code = run_cli("compare", "--graph", demo["graph"], "--db", demo["db"],
                       "--cost", "energy", "--rules", "none", "--profiler", "none",
                       "--out", str(out), "--quiet")
        assert code == 0
        payload = json.loads((out / "compare.json").read_text())
        assert payload["outer search only"]["cost"] == payload["origin"]["cost"]

    def test_single_algorithm_db_inner_equals_origin(self, tmp_path):
        # db with exactly one algorithm per signature: no assignment freedom
        from enerflow.cost import CostDatabase, CostRecord
        from enerflow.graph import save_graph, signatures
        from enerflow.models import chain_graph
        from enerflow.profiling import persist

        g = chain_graph(2)
        db = CostDatabase()
        sigs = signatures(g)
        for node in g.compute_nodes():
            db.add(sigs[node.id].text, 0, CostRecord(1.0 + node.id, 50.0))
        graph_path = tmp_path / "g.json"
        db_path = tmp_path / "db.jsonl"
        save_graph(g, graph_path)
        persist(db, db_path)
        out = tmp_path / "cmp"
        code = run_cli("compare", "--graph", str(graph_path), "--db", str(db_path),
                       "--cost", "energy", "--rules", "none", "--profiler", "none",
                       "--out", str(out), "--quiet")
        assert code == 0
        payload = json.loads((out / "compare.json").read_text())
        assert payload["inner search only"]["cost"] == payload["origin"]["cost"]
