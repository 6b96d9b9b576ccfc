"""Regenerates fixture data and scenarios for the bundles under ../bundles."""
import json
import math
import os
import shutil

ROOT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "bundles")

INCIDENT = {
    "id": "INC-1001",
    "fields": {
        "service": "frontend",
        "upstream_service": "storage",
        "region": "westus",
        "start_time": "2024-05-01T10:00:00Z",
        "end_time": "2024-05-01T10:30:00Z",
    },
}


def write(path, text):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", newline="\n") as f:
        f.write(text)


def write_json(path, value):
    write(path, json.dumps(value, indent=2, sort_keys=True) + "\n")


def table(path, header, types, rows):
    lines = [",".join(header)] + [",".join(str(c) for c in r) for r in rows]
    write(path, "\n".join(lines) + "\n")
    write(path[: -len(".csv")] + ".types", ",".join(types) + "\n")


def availability_data(fixtures):
    table(
        os.path.join(fixtures, "queries", "top_exceptions@service=frontend.csv"),
        ["ExceptionType", "Count"],
        ["text", "integer"],
        [
            ["System.TimeoutException", 4210],
            ["System.Net.Http.HttpRequestException", 1377],
            ["System.IO.IOException", 212],
            ["System.NullReferenceException", 48],
            ["System.ArgumentException", 9],
        ],
    )
    # Upstream availability drops first; the frontend follows it.
    storage, frontend = [], []
    for i in range(30):
        ts = "2024-05-01T10:%02d:00Z" % i
        dip = 0.0 if i < 8 else 6.5 * math.exp(-((i - 16) ** 2) / 30.0)
        wobble = 0.15 * math.sin(i * 1.7)
        storage.append([ts, "%.3f" % (99.95 - dip + wobble)])
        frontend.append([ts, "%.3f" % (99.90 - 0.92 * dip - 0.5 * wobble)])
    table(os.path.join(fixtures, "metrics", "availability.storage.csv"), ["timestamp", "value"], ["timestamp", "decimal"], storage)
    table(os.path.join(fixtures, "metrics", "availability.frontend.csv"), ["timestamp", "value"], ["timestamp", "decimal"], frontend)
    write_json(
        os.path.join(fixtures, "devops.json"),
        {
            "deployments": [
                {"id": "dep-4711", "service": "frontend", "ring": "test", "started": "2024-05-01T10:05:00Z", "status": "in_progress"},
                {"id": "dep-4702", "service": "frontend", "ring": "prod", "started": "2024-04-30T18:00:00Z", "status": "completed"},
                {"id": "dep-4713", "service": "storage", "ring": "prod", "started": "2024-05-01T10:12:00Z", "status": "in_progress"},
            ],
            "code_changes": {
                "dep-4711": [
                    {"commit": "9f1c2e7", "author": "alice", "file": "src/frontend/render.cs", "title": "Tune render cache"},
                    {"commit": "a03b5d1", "author": "bob", "file": "src/frontend/routes.cs", "title": "Add health route"},
                ],
                "dep-4702": [],
            },
        },
    )


def attempt(latency, answer=None, summary="", writes=None, calls=None):
    a = {"result": "success", "latency": latency, "summary": summary}
    if answer:
        a["answer"] = answer
    if writes:
        a["memory_writes"] = writes
    if calls:
        a["plugin_calls"] = calls
    return {"attempts": [a]}


WINDOW = {"from": "2024-05-01T10:00:00Z", "to": "2024-05-01T10:30:00Z"}


def availability_scenario(answers, first_step_failures=0):
    steps = {
        "step1": attempt(
            10,
            summary="Top exception is System.TimeoutException",
            writes={"top_exception": "System.TimeoutException"},
            calls=[{"plugin": "log_query", "args": {"query": "top_exceptions", "template": "top_exceptions", "bindings": {"service": "frontend"}}}],
        ),
        "step2": attempt(5, answers["2"], summary="Checked the known-issue table"),
        "step3.1": attempt(
            4,
            answers["3.1"],
            summary="Deployment dep-4711 is in progress",
            writes={"deployment_id": "dep-4711"},
            calls=[{"plugin": "devops.deployments", "args": dict(WINDOW, service="frontend")}],
        ),
        "step3.2": attempt(
            4,
            answers["3.2"],
            summary="Deployment dep-4711 changes 2 files",
            writes={"changed_files": ["src/frontend/render.cs", "src/frontend/routes.cs"]},
            calls=[{"plugin": "devops.code_changes", "args": {"deployment_id": "dep-4711"}}],
        ),
        "step3.3": attempt(4, summary="Stack collected", writes={"stack_files": ["src/storage/client.cs", "src/frontend/proxy.cs"]}),
        "step3.4": attempt(4, answers["3.4"], summary="Compared stack files with changed files"),
        "step4.1": attempt(
            6,
            summary="Fetched availability of frontend and storage",
            calls=[
                {"plugin": "metric_fetch", "args": dict(WINDOW, metric="availability.frontend")},
                {"plugin": "metric_fetch", "args": dict(WINDOW, metric="availability.storage")},
            ],
        ),
        "step4.2": attempt(
            6,
            answers["4.2"],
            summary="Computed the correlation of the two series",
            calls=[{"plugin": "analysis.pearson", "args": {"key_x": "plugin.metric_fetch.1", "key_y": "plugin.metric_fetch.2"}}],
        ),
        "step5": attempt(3, summary="Paged the on-call engineer"),
    }
    if first_step_failures:
        fail = {"result": "failure", "latency": 2, "error": "log store timed out"}
        steps["step1"]["attempts"] = [fail] * first_step_failures + steps["step1"]["attempts"]
    return {"incident": INCIDENT, "steps": steps}


AVAILABILITY_SCENARIOS = {
    "dependency_issue": ({"2": "N", "3.1": "Y", "3.2": "Y", "3.4": "N", "4.2": "Y"}, 0),
    "known_issue": ({"2": "Y", "3.1": "Y", "3.2": "Y", "3.4": "N", "4.2": "N"}, 0),
    "rollback": ({"2": "N", "3.1": "Y", "3.2": "Y", "3.4": "Y", "4.2": "N"}, 0),
    "no_conclusion": ({"2": "N", "3.1": "N", "3.2": "N", "3.4": "N", "4.2": "N"}, 0),
    "flaky_logs": ({"2": "N", "3.1": "Y", "3.2": "Y", "3.4": "N", "4.2": "Y"}, 1),
}


FANOUT_TSG = """# TSG: fanout_checks — Three independent checks after triage
Inputs: service, start_time, end_time

## Step 1: Triage the incident
Collect the alert details for {service}.
Next:
- Parallel: Step 2.1, Step 3.1, Step 4.1
"""


def fanout_tsg():
    text = FANOUT_TSG
    names = {"2": "network", "3": "storage", "4": "compute"}
    for branch, name in names.items():
        for sub in (1, 2, 3):
            text += "\n## Step %s.%d: Check %s, part %d\n" % (branch, sub, name, sub)
            text += "Inspect the %s signals of the service.\n" % name
            if sub < 3:
                text += "Next:\n- Step %s.%d\n" % (branch, sub + 1)
            else:
                text += (
                    "Next:\n- If Is the %s error count above 100?: Y -> Terminate(%s fault); N -> Step 5\n"
                    % (name, name)
                )
    text += "\n## Step 5: Engage an SRE\nNone of the checks found a cause.\nTerminate: engage SRE\n"
    return text


def main():
    for variant in ("availability_sequential", "availability_parallel"):
        bundle = os.path.join(ROOT, variant)
        fixtures = os.path.join(bundle, "fixtures")
        shutil.rmtree(fixtures, ignore_errors=True)
        availability_data(fixtures)
        for name, (answers, failures) in AVAILABILITY_SCENARIOS.items():
            write_json(os.path.join(bundle, "scenarios", name + ".json"), availability_scenario(answers, failures))

    fanout = os.path.join(ROOT, "fanout")
    write(os.path.join(fanout, "tsg.md"), fanout_tsg())
    steps = {"step1": attempt(10), "step5": attempt(10)}
    for branch in ("2", "3", "4"):
        for sub in (1, 2, 3):
            steps["step%s.%d" % (branch, sub)] = attempt(10, "N" if sub == 3 else None)
    write_json(
        os.path.join(fanout, "scenarios", "all_clear.json"),
        {"incident": {"id": "INC-2002", "fields": {"service": "api"}}, "steps": steps},
    )


if __name__ == "__main__":
    main()
