import json
import subprocess
import sys

import pytest

from segwatch.capture import TCP_SYN, write_pcap
from segwatch.cli import main
from segwatch.detect import iter_alarms_jsonl
from segwatch.flows import flows_to_jsonl

from conftest import pkt, scenario

DATA = __import__("segwatch.data", fromlist=["x"]).__path__[0]
S = 1_000_000


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_run_baseline(tmp_path, capsys):
    code, out, err = run(capsys, "run", "--config", f"{DATA}/fig2.json", "--profile",
                         f"{DATA}/fig2_baseline.json", "--duration", "600", "--seed", "42",
                         "--out", str(tmp_path), "--fail-on-alarm")
    assert code == 0 and out == ""
    assert (tmp_path / "alarms.jsonl").read_text() == ""
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "alarms.jsonl", "flows.jsonl", "ledger.csv", "mesh.jsonl", "report.json"]


def test_run_no_monitoring(tmp_path, capsys):
    code, _, _ = run(capsys, "run", "--duration", "60", "--out", str(tmp_path), "--no-monitoring")
    assert code == 0 and [p.name for p in tmp_path.iterdir()] == ["ledger.csv"]


def test_run_synflood_fails_on_alarm(tmp_path, capsys):
    code, _, err = run(capsys, "run", "--profile", f"{DATA}/fig2_synflood.json",
                       "--out", str(tmp_path), "--fail-on-alarm")
    assert code == 1 and "alarm" in err


def test_run_invalid_config(tmp_path, capsys):
    doc = json.load(open(f"{DATA}/fig2.json"))
    del doc["segments"]
    doc["gateways"][0]["collector"] = 7
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    code, out, err = run(capsys, "run", "--config", str(tmp_path / "bad.json"),
                         "--out", str(tmp_path / "o"))
    assert code == 2 and out == ""
    assert "segments" in err and "collector" in err
    assert not (tmp_path / "o").exists()


def test_run_unreadable_and_bad_json(tmp_path, capsys):
    assert run(capsys, "run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path))[0] == 2
    (tmp_path / "x.json").write_text("{not json")
    assert run(capsys, "run", "--config", str(tmp_path / "x.json"), "--out", str(tmp_path))[0] == 2


def test_usage_error(capsys):
    assert run(capsys, "run")[0] == 2
    assert run(capsys, "detect", "--flows", "a", "--pcap", "b")[0] == 2


def write(tmp_path, name, data):
    p = tmp_path / name
    p.write_bytes(data)
    return str(p)


def test_flows_empty_pcap(tmp_path, capsys):
    code, out, _ = run(capsys, "flows", "--pcap", write(tmp_path, "e.pcap", write_pcap([])),
                       "--obs-point", "c1")
    assert (code, out) == (0, "")


def test_flows_single_flow(tmp_path, capsys):
    pk = [pkt(i * 100_000, "10.0.0.1", "10.0.0.2", obs="c1") for i in range(10)]
    code, out, _ = run(capsys, "flows", "--pcap", write(tmp_path, "f.pcap", write_pcap(pk)),
                       "--obs-point", "c1")
    lines = out.splitlines()
    assert code == 0 and len(lines) == 1 and json.loads(lines[0])["reason"] == "flush"


def test_flows_bad_magic(tmp_path, capsys):
    code, out, err = run(capsys, "flows", "--pcap", write(tmp_path, "b.pcap", b"\0" * 24),
                         "--obs-point", "c1")
    assert code == 2 and out == "" and len(err.strip().splitlines()) == 1
    bad_link = bytearray(write_pcap([]))
    bad_link[20] = 101
    assert run(capsys, "flows", "--pcap", write(tmp_path, "l.pcap", bytes(bad_link)))[0] == 2


def test_flows_timeouts(tmp_path, capsys):
    pk = [pkt(i * 2 * S, "10.0.0.1", "10.0.0.2", obs="c1") for i in range(10)]
    path = write(tmp_path, "t.pcap", write_pcap(pk))
    _, out, _ = run(capsys, "flows", "--pcap", path, "--idle", "1", "--active", "5")
    assert len(out.splitlines()) == 10
    assert run(capsys, "flows", "--pcap", path, "--idle", "9", "--active", "5")[0] == 2


@pytest.mark.parametrize("collector", ["c1", "c2", "g1"])
def test_pipeline_equivalence(tmp_path, capsys, collector):
    sim = scenario("synflood")
    path = write(tmp_path, "cap.pcap", write_pcap(sim.captures[collector]))
    code, out, _ = run(capsys, "flows", "--pcap", path, "--obs-point", collector)
    assert code == 0
    assert out == flows_to_jsonl(sim.flows[collector])


def constant_trace(n_s=600, spike_at=None, factor=20):
    pk = []
    for i in range(n_s):
        t = i * S + 300_000
        k = factor if spike_at is not None and t >= spike_at * S else 1
        pk += [pkt(t + j * 500, "10.0.0.1", "10.0.0.2", 1000, 502, obs="c1") for j in range(k)]
    return pk


def test_detect_constant_trace(tmp_path, capsys):
    path = write(tmp_path, "c.pcap", write_pcap(constant_trace()))
    code, out, _ = run(capsys, "detect", "--pcap", path, "--fail-on-alarm")
    assert (code, out) == (0, "")


def test_detect_scan_trace(tmp_path, capsys):
    pk = [pkt(i * 1000, "10.0.0.7", "10.0.0.2", 40000, p, flags=TCP_SYN) for i, p in enumerate(range(1, 26))]
    code, out, _ = run(capsys, "detect", "--pcap", write(tmp_path, "s.pcap", write_pcap(pk)))
    alarms = list(iter_alarms_jsonl(out.splitlines()))
    assert code == 0 and [a.kind for a in alarms] == ["port_scan"] and alarms[0].observed == 25


def test_detect_spike_trace(tmp_path, capsys):
    path = write(tmp_path, "k.pcap", write_pcap(constant_trace(spike_at=300)))
    code, out, _ = run(capsys, "detect", "--pcap", path, "--fail-on-alarm")
    vol = [a for a in iter_alarms_jsonl(out.splitlines()) if a.kind == "volume_anomaly"]
    assert code == 1 and vol and min(a.window_index for a in vol) in (30, 31)


def test_detect_flows_input_and_config(tmp_path, capsys):
    sim = scenario("portscan")
    p = tmp_path / "flows.jsonl"
    p.write_text(flows_to_jsonl(sim.flows["c1"]))
    cfg = tmp_path / "det.json"
    cfg.write_text(json.dumps({"scan_port_threshold": 40}))
    _, out_default, _ = run(capsys, "detect", "--flows", str(p), "--config", f"{DATA}/fig2.json")
    assert "port_scan" in out_default
    _, out_high, _ = run(capsys, "detect", "--flows", str(p), "--config", str(cfg))
    assert "port_scan" not in out_high
    assert run(capsys, "detect", "--flows", str(p), "--config", str(cfg))[1] == out_high


def test_detect_parse_failure(tmp_path, capsys):
    p = tmp_path / "junk.jsonl"
    p.write_text("{\"ts_first_us\": 1}\n")
    assert run(capsys, "detect", "--flows", str(p))[0] == 2
    p.write_text("not json\n")
    assert run(capsys, "detect", "--flows", str(p))[0] == 2


def test_module_entry_point(tmp_path):
    pk = [pkt(0, "10.0.0.1", "10.0.0.2")]
    path = write(tmp_path, "m.pcap", write_pcap(pk))
    res = subprocess.run([sys.executable, "-m", "segwatch", "flows", "--pcap", path],
                         capture_output=True, text=True)
    assert res.returncode == 0 and len(res.stdout.splitlines()) == 1
