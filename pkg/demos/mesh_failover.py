"""Side-channel robustness: lose a relay, then lose a collector."""
from segwatch.mesh import reroutes
from segwatch.sim import bundled, load_config, load_profile, run_scenario

config = load_config(bundled("fig2.json"))


def run(name):
    return run_scenario(config, load_profile(bundled(f"fig2_{name}.json"), config.hosts), 600)


base = run("baseline")
relay = run("relay_failure")

# --- Relay r1 goes down at 120 s ---
paths = {}
for e in relay.mesh_log:
    if e["event"] == "tx" and e["sender"] == "c1" and e["kind"] == "flow_batch":
        paths.setdefault(tuple(e["path"]), []).append(e["ts_us"] // 1_000_000)
for path, times in paths.items():
    print(" -> ".join(path), "at", times)
print("reroutes logged:", reroutes(relay.mesh_log))
print("same batches delivered:", set(relay.delivered_batches) == set(base.delivered_batches))

# --- Collector c2 is cut off between 160 s and 250 s ---
outage = run("collector_outage")
print("coverage gaps:", outage.report.coverage_gaps)
for a in outage.alarms:
    print(f"  {a.ts_us / 1e6:6.1f}s {a.obs_point} {a.kind} {a.subject}")
