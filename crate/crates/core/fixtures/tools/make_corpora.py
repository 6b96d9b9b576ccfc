"""Regenerates the query-template corpus, the lint corpus and the wide table
fixture under ../qpp, ../lint and ../tables."""
import json
import os
import random
import re
import shutil

HERE = os.path.dirname(os.path.abspath(__file__))
FIXTURES = os.path.join(HERE, "..")


def write(path, text):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", newline="\n") as f:
        f.write(text)


def write_json(path, value):
    write(path, json.dumps(value, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- templates

PARAMS = [
    "service", "region", "ring", "cluster", "tenant", "start_time", "end_time",
    "build", "node_pool", "datacenter", "api", "status_code", "limit",
    "threshold", "owner", "team", "deployment_id", "error_code", "sku",
    "account", "partition",
]
INTEGER_PARAMS = {"status_code", "limit", "threshold", "partition"}
LIST_PARAMS = {"error_code"}
TABLES = ["ServiceLogs", "Deployments", "RequestTelemetry", "NodeEvents",
          "AlertHistory", "QuotaUsage", "FrontDoorLogs", "StorageMetrics"]
COLUMNS = ["Service", "Region", "DeployRing", "Cluster", "TenantId", "Build",
           "NodePool", "Datacenter", "ApiName", "StatusCode", "Owner", "Team",
           "DeploymentId", "ErrorCode", "Sku", "Account", "Partition"]
TOKEN = re.compile(r"\{\{|\}\}|\{([A-Za-z][A-Za-z0-9_]*)\}")


def value_for(rng, name):
    if name in INTEGER_PARAMS:
        return rng.randint(0, 5000)
    if name in LIST_PARAMS:
        return [rng.randint(100, 999) for _ in range(rng.randint(1, 4))]
    if name in ("start_time", "end_time"):
        return "2024-0%d-1%dT0%d:00:00Z" % (rng.randint(1, 9), rng.randint(0, 9), rng.randint(0, 9))
    return "%s-%s" % (name.replace("_", ""), rng.choice(["alpha", "beta", "prod", "test", "eu", "us"]))


def render(value):
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    return str(value)


def substitute(text, params):
    def repl(m):
        if m.group(0) == "{{":
            return "{"
        if m.group(0) == "}}":
            return "}"
        return render(params[m.group(1)])
    return TOKEN.sub(repl, text)


def placeholders(text):
    out = []
    for m in TOKEN.finditer(text):
        name = m.group(1)
        if name and name not in out:
            out.append(name)
    return out


def param_line(rng, name):
    col = rng.choice(COLUMNS)
    if name in INTEGER_PARAMS:
        return "| where %s >= {%s}" % (col, name)
    if name in LIST_PARAMS:
        return "| where %s in ({%s})" % (col, name)
    if name == "start_time":
        return "| where TIMESTAMP >= datetime({start_time})"
    if name == "end_time":
        return "| where TIMESTAMP < datetime({end_time})"
    return "| where %s == '{%s}'" % (col, name)


def filler_line(rng, i):
    kind = rng.randrange(6)
    if kind == 0:
        return "| extend Bucket%d = bin(TIMESTAMP, 5m)" % i
    if kind == 1:
        return "| extend Tags%d = dynamic({{\"source\": \"tsg\", \"slot\": %d}})" % (i, i)
    if kind == 2:
        return "| where isnotempty(%s)" % rng.choice(COLUMNS)
    if kind == 3:
        return "| extend Label%d = strcat(\"{{\", %s, \"}}\")" % (i, rng.choice(COLUMNS))
    if kind == 4:
        return "    | project-away Debug%d" % i
    return "| extend Score%d = todouble(Latency) * %d.5" % (i, i)


def make_template(rng, n_params, n_lines):
    names = rng.sample(PARAMS, n_params)
    lines = [rng.choice(TABLES)]
    lines += [param_line(rng, n) for n in names]
    i = 0
    while len(lines) < n_lines - 2:
        if rng.random() < 0.15:
            lines.append("| extend Echo%d = '{%s}'" % (i, rng.choice(names)))
        elif rng.random() < 0.05:
            lines.append("| extend Braced%d = \"{{{%s}}}\"" % (i, rng.choice(names)))
        else:
            lines.append(filler_line(rng, i))
        i += 1
    lines.append("| summarize Count = count() by %s" % rng.choice(COLUMNS))
    lines.append("| top 20 by Count desc")
    return "\n".join(lines[:n_lines])


def make_guide(rng, gi, count):
    tsg_id = "qpp_corpus_%02d" % gi
    blocks = []
    for ti in range(count):
        name = "q%02d_%02d" % (gi, ti)
        text = make_template(rng, rng.randint(5, 11), rng.randint(11, 51))
        blocks.append((name, text))
    return tsg_id, blocks


def guide_markdown(tsg_id, inputs, blocks):
    out = ["# TSG: %s — Query corpus guide %s" % (tsg_id, tsg_id[-2:]),
           "Inputs: " + ", ".join(inputs), ""]
    for i, (name, text) in enumerate(blocks):
        out.append("## Step %d: Run %s" % (i + 1, name))
        out.append("Run the query below and keep the result.")
        out.append("")
        out.append("```kql name=%s" % name)
        out.extend(text.split("\n"))
        out.append("```")
        out.append("")
        if i + 1 < len(blocks):
            out += ["Next:", "- Step %d" % (i + 2), ""]
        else:
            out += ["Terminate: corpus complete", ""]
    return "\n".join(out)


RING_TEMPLATE = "\n".join([
    "Deployments",
    "| where TIMESTAMP between (datetime({start_time}) .. datetime({end_time}))",
    "| where Service == '{service}'",
    "| where DeployRing == '{ring}'",
    "| where Region == '{region}'",
    "| where Status != 'Succeeded'",
    "| extend Meta = dynamic({{\"ring\": \"{ring}\"}})",
    "| project DeploymentId, DeployRing, StartTime, Status, Owner",
    "| join kind=leftouter (Owners | where Team == '{team}') on Owner",
    "| order by StartTime desc",
    "| take 50",
])


def qpp_corpus():
    root = os.path.join(FIXTURES, "qpp")
    shutil.rmtree(root, ignore_errors=True)
    rng = random.Random(86)
    guides = []
    for gi in range(1, 12):
        guides.append(make_guide(rng, gi, 8))
    guides.append(("qpp_deploy_ring", [("ring_deployments", RING_TEMPLATE)]))
    total = 0
    for tsg_id, blocks in guides:
        inputs = []
        for _, text in blocks:
            for p in placeholders(text):
                if p not in inputs:
                    inputs.append(p)
        write(os.path.join(root, "guides", tsg_id + ".md"), guide_markdown(tsg_id, inputs, blocks))
        golden = [{"name": n, "language": "kql", "placeholders": placeholders(t), "text": t}
                  for n, t in blocks]
        write_json(os.path.join(root, "golden", tsg_id + ".templates.json"), golden)
        instances = []
        for n, t in blocks:
            params = {p: value_for(rng, p) for p in placeholders(t)}
            if n == "ring_deployments":
                params = {"start_time": "2024-05-01T10:00:00Z", "end_time": "2024-05-01T10:30:00Z",
                          "service": "frontend", "ring": "test", "region": "westus",
                          "team": "edge"}
            instances.append({"template": n, "params": params, "expected": substitute(t, params)})
        write_json(os.path.join(root, "golden", tsg_id + ".instances.json"), instances)
        total += len(blocks)
    return total


# --------------------------------------------------------------------- lint

class Doc:
    """Builds a guide line by line and records seeded defects by line."""

    def __init__(self, tsg_id, inputs):
        self.lines = ["# TSG: %s — Seeded guide %s" % (tsg_id, tsg_id),
                      "Inputs: " + ", ".join(inputs), ""]
        self.defects = []

    def add(self, text, rule=None):
        self.lines.append(text)
        if rule:
            self.defects.append({"rule": rule, "line": len(self.lines)})

    def step(self, sid, title, rule=None):
        self.add("## Step %s: %s" % (sid, title), rule)
        self.add("Follow the instructions for this step.")

    def query(self, name, rows, seeded=None):
        self.add("")
        self.add("```kql name=%s" % name)
        fence = len(self.lines)
        for text in rows:
            self.add(text, (seeded or {}).get(text))
        self.add("```")
        self.add("")
        return fence

    def next(self, *targets, rule=None):
        self.add("Next:")
        for t in targets:
            self.add("- " + t, rule)
        self.add("")

    def text(self):
        return "\n".join(self.lines) + "\n"


def lint_doc_01():
    d = Doc("seed_01", ["service", "start_time", "end_time"])
    d.step("1", "Count errors")
    d.query("errors", ["ServiceLogs",
                       "| where TIMESTAMP > ago(1h)",
                       "| where Service == '{service}'",
                       "| summarize count() by Level"],
            {"| where TIMESTAMP > ago(1h)": "DI-HARDCODED-TIME"})
    d.next("Step 2")
    d.step("2", "Inspect the cluster")
    d.query("cluster", ["NodeEvents",
                        "| where Cluster == '{cluster}'",
                        "| take 10"],
            {"| where Cluster == '{cluster}'": "DF-INPUT-UNKNOWN"})
    d.next("If Is the error count high?: Y -> Step 3; N -> Terminate(no action)", rule="CP-UNQUANTIFIED")
    d.step("3", "Escalate")
    d.add("Terminate: escalate to the owning team")
    return d


def lint_doc_02():
    d = Doc("seed_02", ["service"])
    d.step("1", "Look at logs")
    d.query("logs", ["ServiceLogs", "| where Service == '{service}'", "| take 5"])
    d.next("Step 2")
    d.step("2", "Check the dashboard", rule="CF-NEXT-MISSING")
    d.add("Open the dashboard and compare with last week.")
    d.add("")
    d.step("3", "Wrap up", rule="PS-TERMINATION-UNMARKED")
    d.add("Write a short summary in the incident.")
    return d


def lint_doc_03():
    d = Doc("seed_03", ["service", "region"])
    d.step("1", "Start")
    d.next("Step 7", rule="CF-NEXT-DANGLING")
    d.step("3", "Regional view")
    d.query("regional", ["RequestTelemetry",
                         "| where Region == '{region}'",
                         "| where TIMESTAMP > datetime(2024-03-01)"],
            {"| where TIMESTAMP > datetime(2024-03-01)": "DI-HARDCODED-TIME"})
    d.next("Step 2")
    d.step("2", "Service view", rule="PS-STEP-ORDER")
    d.add("Terminate: regional outage")
    return d


def lint_doc_04():
    d = Doc("seed_04", ["service"])
    d.step("1", "Start")
    d.next("Step 2")
    d.step("2", "First copy")
    d.next("Step 3")
    d.step("2", "Second copy", rule="PS-DUPLICATE-STEP")
    d.next("Goto the next step", rule="PS-UNPARSEABLE-DIRECTIVE")
    d.step("3", "Finish")
    d.add("Terminate: done")
    return d


def lint_doc_05():
    d = Doc("seed_05", ["service", "start_time"])
    d.step("1", "Two queries")
    d.query("shared", ["ServiceLogs", "| where Service == '{service}'"])
    fence = d.query("shared", ["ServiceLogs", "| where TIMESTAMP > datetime({start_time})"])
    d.defects.append({"rule": "PS-DUPLICATE-QUERY", "line": fence})
    d.next("Step 2")
    d.step("x.1", "Broken header", rule="PS-MALFORMED-HEADER")
    d.add("This heading has no valid step id.")
    d.add("")
    d.step("2", "Final")
    d.add("Terminate: done")
    d.add("")
    d.add("```kql name=leftover", rule="PS-UNTERMINATED-BLOCK")
    d.add("ServiceLogs")
    return d


def lint_doc_06():
    d = Doc("seed_06", ["service", "start_time", "end_time"])
    d.step("1", "Latency")
    d.query("latency", ["RequestTelemetry",
                        "| where Service == '{service}'",
                        "| where TIMESTAMP > ago(30m)",
                        "| where Owner == '{owner}'",
                        "| summarize percentile(Latency, 99)"],
            {"| where TIMESTAMP > ago(30m)": "DI-HARDCODED-TIME",
             "| where Owner == '{owner}'": "DF-INPUT-UNKNOWN"})
    d.next("If Are there significant latency spikes?: Y -> Step 2; N -> Step 3", rule="CP-UNQUANTIFIED")
    d.step("2", "Spike analysis", rule="CF-NEXT-MISSING")
    d.add("Compare the spike against the deployment calendar.")
    d.add("")
    d.step("3", "Close")
    d.add("Terminate: latency within budget")
    return d


def lint_doc_07():
    d = Doc("seed_07", ["cluster"])
    d.step("1", "Cluster health")
    d.query("health", ["NodeEvents",
                       "| where Cluster == '{cluster}'",
                       "| where Partition == '{partition}'",
                       "| summarize count() by State"],
            {"| where Partition == '{partition}'": "DF-INPUT-UNKNOWN"})
    d.next("Step 1.5", rule="CF-NEXT-DANGLING")
    d.step("2", "Repair", rule="PS-TERMINATION-UNMARKED")
    d.add("Cordon the failing nodes.")
    return d


def lint_doc_08():
    d = Doc("seed_08", ["service", "start_time", "end_time"])
    d.step("2", "Begin")
    d.next("Step 1")
    d.step("1", "Logs", rule="PS-STEP-ORDER")
    d.query("logs", ["ServiceLogs",
                     "| where TIMESTAMP between (datetime(2024-01-01) .. datetime(2024-01-02))",
                     "| where Service == '{service}'"],
            {"| where TIMESTAMP between (datetime(2024-01-01) .. datetime(2024-01-02))": "DI-HARDCODED-TIME"})
    d.next("If Were many requests throttled?: Y -> Terminate(throttling); N -> Step 3", rule="CP-UNQUANTIFIED")
    d.step("3", "End")
    d.add("Terminate: no throttling")
    return d


def lint_doc_09():
    d = Doc("seed_09", ["service"])
    d.step("1", "Start")
    d.next("Step 2")
    d.step("2", "Directive typo")
    d.add("Next:")
    d.add("- Step 3")
    d.add("- Step2", "PS-UNPARSEABLE-DIRECTIVE")
    d.add("")
    d.step("3", "Next step is missing", rule="CF-NEXT-MISSING")
    d.add("Nothing tells the reader where to go.")
    d.add("")
    d.step("4", "Stop")
    d.query("tenants", ["QuotaUsage",
                        "| where Service == '{service}' and TenantId == '{tenant}'"],
            {"| where Service == '{service}' and TenantId == '{tenant}'": "DF-INPUT-UNKNOWN"})
    d.add("Terminate: quota exhausted")
    return d


def lint_doc_10():
    d = Doc("seed_10", ["service", "region"])
    d.step("1", "Start")
    d.query("start", ["AlertHistory", "| where Service == '{service}'"])
    d.next("Step 2")
    d.step("2", "Region")
    d.next("If Is the regional error rate high?: Y -> Step 3; N -> Step 9", rule="CP-UNQUANTIFIED")
    d.defects.append({"rule": "CF-NEXT-DANGLING", "line": len(d.lines) - 1})
    d.step("3", "Duplicate name")
    fence = d.query("start", ["AlertHistory", "| where Region == '{region}'"])
    d.defects.append({"rule": "PS-DUPLICATE-QUERY", "line": fence})
    d.add("Terminate: regional incident")
    return d


def lint_doc_11():
    d = Doc("seed_11", ["service"])
    d.step("1", "Only step", rule="PS-TERMINATION-UNMARKED")
    d.query("only", ["ServiceLogs",
                     "| where Service == '{service}'",
                     "| where TIMESTAMP > ago(2d)",
                     "| where Build == '{build}'"],
            {"| where TIMESTAMP > ago(2d)": "DI-HARDCODED-TIME",
             "| where Build == '{build}'": "DF-INPUT-UNKNOWN"})
    return d


def lint_doc_12():
    d = Doc("seed_12", ["service"])
    d.step("1", "Begin")
    d.next("Parallel: Step 2, Step 4", rule="CF-NEXT-DANGLING")
    d.step("2", "Branch", rule="CF-NEXT-MISSING")
    d.add("Check the branch.")
    d.add("")
    d.step("1.5", "Out of order", rule="PS-STEP-ORDER")
    d.add("Terminate: done")
    return d


CLEAN_DOC = """# TSG: clean_latency — Latency regression on an API
Inputs: service, api, start_time, end_time

## Step 1: Measure latency
```kql name=latency
RequestTelemetry
| where TIMESTAMP between (datetime({start_time}) .. datetime({end_time}))
| where Service == '{service}' and ApiName == '{api}'
| summarize P99 = percentile(Latency, 99) by bin(TIMESTAMP, 5m)
```
Produces: p99_series
Next:
- If Is the P99 latency above 500 ms?: Y -> Step 2; N -> Terminate(latency normal)

## Step 2: Find slow dependencies
```kql name=dependencies
DependencyTelemetry
| where TIMESTAMP between (datetime({start_time}) .. datetime({end_time}))
| where Service == '{service}'
| summarize P99 = percentile(Duration, 99) by Target
| top 3 by P99 desc
```
Produces: slow_dependency
Next:
- Step 3

## Step 3: Decide
Compare {slow_dependency} with the dependency status page.
Next:
- If Is the dependency reporting an outage?: Y -> Terminate(transfer to dependency owner); N -> Step 4

## Step 4: Engage the owners
Share {p99_series} with the API owners.
Terminate: engage API owners
"""


def lint_corpus():
    root = os.path.join(FIXTURES, "lint")
    shutil.rmtree(root, ignore_errors=True)
    docs = [lint_doc_01, lint_doc_02, lint_doc_03, lint_doc_04, lint_doc_05, lint_doc_06,
            lint_doc_07, lint_doc_08, lint_doc_09, lint_doc_10, lint_doc_11, lint_doc_12]
    total = 0
    for i, build in enumerate(docs, 1):
        d = build()
        stem = "seed_%02d" % i
        write(os.path.join(root, "seeded", stem + ".md"), d.text())
        defects = sorted(d.defects, key=lambda x: (x["line"], x["rule"]))
        write_json(os.path.join(root, "seeded", stem + ".manifest.json"), defects)
        total += len(defects)
    write(os.path.join(root, "clean", "clean_latency.md"), CLEAN_DOC)
    return total


# ------------------------------------------------------------------- tables

def wide_table():
    rng = random.Random(394)
    path = os.path.join(FIXTURES, "tables", "requests_394x6.csv")
    header = ["Timestamp", "Region", "Endpoint", "StatusCode", "LatencyMs", "ErrorMessage"]
    types = ["timestamp", "text", "text", "integer", "decimal", "text"]
    regions = ["westus", "eastus", "northeurope", "southeastasia", "centralindia"]
    endpoints = ["/api/v1/orders", "/api/v1/checkout", "/api/v2/catalog/search", "/healthz", "/api/v1/profile"]
    errors = ["upstream request timeout after 30s", "connection reset by peer while reading response",
              "certificate verification failed for storage endpoint", "none", "quota exceeded for tenant"]
    rows = []
    for i in range(394):
        minute = i % 60
        hour = 10 + i // 60
        rows.append(["2024-05-01T%02d:%02d:00Z" % (hour, minute), rng.choice(regions), rng.choice(endpoints),
                     rng.choice([200, 200, 200, 429, 500, 503]), "%.3f" % rng.uniform(5, 2500),
                     rng.choice(errors)])
    lines = [",".join(header)] + [",".join(str(c) for c in r) for r in rows]
    write(path, "\n".join(lines) + "\n")
    write(path[: -len(".csv")] + ".types", ",".join(types) + "\n")
    return os.path.getsize(path)


if __name__ == "__main__":
    print("templates:", qpp_corpus())
    print("seeded defects:", lint_corpus())
    print("table bytes:", wide_table())
