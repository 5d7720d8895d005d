"""Retrofit path: a pcap from an existing mirror port goes through the same pipeline.

The capture is written from a simulated collector here so the result can
be compared with what that collector exported in the simulation.
"""
import subprocess
import sys
import tempfile
from pathlib import Path

from segwatch.capture import parse_pcap, write_pcap
from segwatch.flows import build_flows, flows_to_jsonl
from segwatch.sim import bundled, load_config, load_profile, run_scenario

config = load_config(bundled("fig2.json"))
out = run_scenario(config, load_profile(bundled("fig2_portscan.json"), config.hosts), 600)

tmp = Path(tempfile.mkdtemp())
pcap = tmp / "c1.pcap"
pcap.write_bytes(write_pcap(out.captures["c1"]))
print(f"wrote {pcap} ({pcap.stat().st_size} bytes)")

# --- In-process ---
records, stats = parse_pcap(pcap.read_bytes(), "c1")
print(stats)
flows = build_flows(records, config.flow, "c1")
print("identical to simulator export:", flows_to_jsonl(flows) == flows_to_jsonl(out.flows["c1"]))

# --- Through the command line ---
res = subprocess.run([sys.executable, "-m", "segwatch", "detect", "--pcap", str(pcap),
                      "--obs-point", "c1"], capture_output=True, text=True)
print(res.stdout, end="")
