"""Smoke test for the tsgflow Python module.

Build and install first:

    pip install --no-build-isolation ./crates/python

Then run with `python python/smoke_test.py` or `pytest python/smoke_test.py`.
"""

import json
import math
import pathlib
import random

import tsgflow

ROOT = pathlib.Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "crates" / "core" / "fixtures"
SEQUENTIAL = FIXTURES / "bundles" / "availability_sequential"
PARALLEL = FIXTURES / "bundles" / "availability_parallel"


def test_guide_compiles():
    guide = tsgflow.Guide.load(SEQUENTIAL / "tsg.md")
    dag = guide.dag()
    assert len(dag["nodes"]) == 11
    assert len(dag["edges"]) == 15
    assert guide.validate() == []
    assert json.loads(guide.dag_json()) == dag
    assert guide.lint() == []
    names = [t["name"] for t in guide.templates()]
    assert len(names) == len(set(names)) > 0


def test_prepare_matches_golden():
    golden = json.loads((FIXTURES / "qpp" / "golden" / "qpp_deploy_ring.instances.json").read_text())
    guide = tsgflow.Guide.load(FIXTURES / "qpp" / "guides" / "qpp_deploy_ring.md")
    for case in golden:
        assert guide.prepare(case["template"], case["params"]) == case["expected"]
        assert tsgflow.prepare_query(guide.manifest_json(), case["template"], case["params"]) == case["expected"]
    try:
        guide.prepare("ring_deployments", {"ring": "test"})
    except tsgflow.TsgflowError as e:
        assert "missing parameter" in str(e)
    else:
        raise AssertionError("missing parameter accepted")


def test_runs_and_sweeps():
    bundle = tsgflow.Bundle(PARALLEL)
    assert "rollback" in bundle.scenarios()
    report = bundle.run("rollback", executors=3)
    assert report["status"]["status"] == "concluded"
    assert report["trace"][-1]["kind"] == "run_terminated"
    assert bundle.trace_jsonl("rollback", 3) == bundle.trace_jsonl("rollback", 3)

    sweep = bundle.sweep("rollback", "2..5")
    assert [e["k"] for e in sweep["entries"]] == [2, 3, 4, 5]
    assert sweep["bounds_ok"] and sweep["saturation_ok"]
    oracle = bundle.oracle("rollback")
    for e in sweep["entries"]:
        assert oracle["critical_path"] <= e["makespan"] <= oracle["serial_sum"]


def test_lint_reports_seeded_defects():
    text = (FIXTURES / "lint" / "seeded" / "seed_01.md").read_text()
    rules = {f["rule"] for f in tsgflow.lint(text)}
    assert "DF-INPUT-UNKNOWN" in rules


def _pearson(x, y):
    mx, my = sum(x) / len(x), sum(y) / len(y)
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def test_pearson():
    rng = random.Random(7)
    for _ in range(20):
        n = rng.randint(3, 50)
        x = [rng.uniform(-10, 10) for _ in range(n)]
        y = [rng.uniform(-10, 10) for _ in range(n)]
        assert abs(tsgflow.pearson(x, y) - _pearson(x, y)) < 1e-9
    assert tsgflow.pearson([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]) == 1.0
    assert tsgflow.pearson([1.0, 2.0, 3.0], [3.0, 2.0, 1.0]) == -1.0


if __name__ == "__main__":
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    for t in tests:
        t()
        print(f"ok {t.__name__}")
    print(f"{len(tests)} passed")
