import copy
import json
from collections import Counter

import pytest

from segwatch.capture import PROTO_TCP, TCP_SYN
from segwatch.events import EventQueue
from segwatch.sim import (ConfigError, SplitMix64, bundled, generate_traffic, load_config,
                          load_profile, prng_next, run_scenario)
from segwatch.sim.scenario import decode_batch, encode_batch
from segwatch.sim.traffic import check_profile_duration

from conftest import scenario


def oracle_splitmix(seed, n):
    """Textbook SplitMix64 with explicit masking, kept apart from the library."""
    m = 2**64
    out, s = [], seed
    for _ in range(n):
        s = (s + 0x9E3779B97F4A7C15) % m
        z = s
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) % m
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) % m
        out.append(z ^ (z >> 31))
    return out


def test_prng_vectors():
    r = SplitMix64(0)
    assert [r.next_u64(), r.next_u64()] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4]
    for seed in (1, 42, 2**64 - 1, 0xDEADBEEF):
        r = SplitMix64(seed)
        assert [r.next_u64() for _ in range(20)] == oracle_splitmix(seed, 20)
    assert prng_next(0)[1] == 0xE220A8397B1DCDAF
    a, b = SplitMix64(5), SplitMix64(5)
    assert [a.next_float() for _ in range(10)] == [b.next_float() for _ in range(10)]
    assert all(0 <= a.next_float() < 1 for _ in range(1000))


def test_event_queue_fifo():
    q, seen = EventQueue(), []
    for tag in "abc":
        q.schedule(5, seen.append, tag)
    q.schedule(1, seen.append, "first")
    q.run()
    assert seen == ["first", "a", "b", "c"] and q.now == 5
    with pytest.raises(ValueError):
        q.schedule(4, seen.append, "past")


def test_fig2_loads(fig2):
    assert len(fig2.segments) == 2
    assert [s.collector for s in fig2.segments] == ["c1", "c2"]
    assert [g.collector for g in fig2.gateways] == ["g1"]
    assert len(fig2.aggregators) == 1 and fig2.root_aggregator == "a1"
    assert fig2.seed == 42


def fig2_doc():
    return copy.deepcopy(bundled("fig2.json"))


def kinds_of(doc):
    with pytest.raises(ConfigError) as e:
        load_config(doc)
    return e.value


def test_dangling_switch():
    d = fig2_doc()
    d["gateways"][0]["connects"] = ["sw1", "sw9"]
    err = kinds_of(d)
    assert err.kinds() == {"DanglingReference"} and "sw9" in str(err)


def test_duplicate_ip():
    d = fig2_doc()
    d["segments"][1]["hosts"][0]["ip"] = d["segments"][0]["hosts"][0]["ip"]
    assert kinds_of(d).kinds() == {"DuplicateIp"}


def test_all_violations_reported():
    d = fig2_doc()
    d["segments"][1]["hosts"][0]["ip"] = d["segments"][0]["hosts"][0]["ip"]
    d["gateways"][0]["connects"] = ["sw1", "sw9"]
    del d["segments"][0]["switch"]
    d["mesh"]["links"][0]["loss_prob"] = 1.5
    err = kinds_of(d)
    assert {"DuplicateIp", "DanglingReference", "SchemaViolation"} <= err.kinds()
    assert len(err.violations) >= 4


def test_cyclic_aggregators():
    d = fig2_doc()
    d["mesh"]["nodes"].append({"id": "a2", "role": "aggregator"})
    d["aggregators"] = [{"id": "a1", "parent": "a2", "children": ["c1", "c2", "a2"]},
                        {"id": "a2", "parent": "a1", "children": ["g1", "a1"]}]
    assert "CyclicAggregatorTree" in kinds_of(d).kinds()


def test_missing_segments():
    d = fig2_doc()
    del d["segments"]
    assert "SchemaViolation" in kinds_of(d).kinds()


def test_periodic_session_count(fig2):
    prof = load_profile({"sessions": [{"client": "hmi1", "server": "plc1", "server_port": 502,
                                       "period_s": 10, "request_bytes": 64, "response_bytes": 64,
                                       "protocol": "udp"}]}, fig2.hosts)
    pk = generate_traffic(prof, SplitMix64(1), 60, fig2.hosts)
    assert len(pk) == 12
    assert [p.ts_us for p in pk[::2]] == [i * 10_000_000 for i in range(6)]


def test_port_scan_generation(fig2):
    prof = load_profile({"attacks": [{"kind": "port_scan", "start_s": 1, "stop_s": 10,
                                      "params": {"attacker": "eng1", "target": "plc2",
                                                 "ports": {"from": 1, "to": 50}}}]}, fig2.hosts)
    pk = generate_traffic(prof, SplitMix64(1), 60, fig2.hosts)
    assert len(pk) == 50 and len({p.dst_port for p in pk}) == 50
    assert all(p.protocol == PROTO_TCP and p.tcp_flags == TCP_SYN for p in pk)


def test_traffic_deterministic(fig2):
    prof = load_profile(bundled("fig2_baseline.json"), fig2.hosts)
    a = generate_traffic(prof, SplitMix64(42), 120, fig2.hosts)
    b = generate_traffic(prof, SplitMix64(42), 120, fig2.hosts)
    c = generate_traffic(prof, SplitMix64(43), 120, fig2.hosts)
    assert a == b and a != c
    assert all(x.ts_us <= y.ts_us for x, y in zip(a, a[1:]))


def test_profile_validation(fig2):
    with pytest.raises(ConfigError) as e:
        load_profile({"sessions": [{"client": "nobody", "server": "plc1", "server_port": 1,
                                    "period_s": 0, "request_bytes": 64, "response_bytes": 64}]},
                     fig2.hosts)
    assert e.value.kinds() == {"DanglingReference", "SchemaViolation"}
    prof = load_profile(bundled("fig2_synflood.json"), fig2.hosts)
    with pytest.raises(ConfigError):
        check_profile_duration(prof, 100)


def test_batch_codec():
    flows = scenario("baseline").flows["c1"][:3]
    assert decode_batch(encode_batch("c1", 4, flows)) == ("c1", 4, flows)


def test_tap_completeness():
    out = scenario("baseline")
    # every ledger packet crosses c1 or c2 (its source switch); cross-segment ones also g1
    assert len(out.captures["c1"]) + len(out.captures["c2"]) == len(out.ledger) + len(out.captures["g1"])
    for cid, recs in out.captures.items():
        assert all(not r.truncated and r.obs_point == cid for r in recs)


def test_ledger_latencies(fig2):
    out = scenario("baseline")
    lat = {d - s for _, s, d in out.ledger}
    # host->switch->host, or host->switch->gateway->switch->host
    assert lat == {100, 300}


def test_end_to_end_conservation():
    out = scenario("baseline")
    view = out.aggregators["a1"].view
    assert sum(g.canonical.pkts for g in view.flows()) == len(out.ledger)
    assert out.report.totals["pkts"] == len(out.ledger)


def test_no_duplicate_logical_flows():
    view = scenario("baseline").aggregators["a1"].view
    flows = view.flows()
    for i, a in enumerate(flows):
        for b in flows[i + 1:]:
            if (a.key, a.initiator_is_lo) == (b.key, b.initiator_is_lo):
                gap = max(a.first_ts, b.first_ts) - min(a.last_ts, b.last_ts)
                assert gap > view.idle_timeout_us


def test_horizontal_scaling():
    base_cfg = fig2_doc()
    d = fig2_doc()
    d["segments"].append({"id": "seg3", "switch": "sw3", "collector": "c3", "hosts": [
        {"id": "xhmi3", "ip": "10.0.3.10"}, {"id": "xplc4", "ip": "10.0.3.21"}]})
    d["gateways"].append({"id": "gw2", "connects": ["sw2", "sw3"], "collector": "g2"})
    d["mesh"]["nodes"] += [{"id": "c3", "role": "collector"}, {"id": "g2", "role": "collector"}]
    d["mesh"]["links"] += [{"a": "c3", "b": "r2", "latency_us": 2000, "loss_prob": 0.01},
                           {"a": "g2", "b": "r2", "latency_us": 2000, "loss_prob": 0.01}]
    d["aggregators"][0]["children"] += ["c3", "g2"]
    prof = bundled("fig2_baseline.json")
    bigger = copy.deepcopy(prof)
    bigger["sessions"].append({"client": "xhmi3", "server": "xplc4", "server_port": 502,
                               "period_s": 1, "request_bytes": 78, "response_bytes": 85})
    small_cfg, big_cfg = load_config(base_cfg), load_config(d)
    a = run_scenario(small_cfg, load_profile(prof, small_cfg.hosts), 300)
    b = run_scenario(big_cfg, load_profile(bigger, big_cfg.hosts), 300)
    for cid in ("c1", "c2", "g1"):
        assert a.flows[cid] == b.flows[cid]
        assert a.captures[cid] == b.captures[cid]
    old = {a_.obs_point for a_ in a.alarms}
    assert a.alarms == [x for x in b.alarms if x.obs_point in old | {"a1"}]
    seg_a = {s["segment"]: s for s in a.report.per_segment}
    seg_b = {s["segment"]: s for s in b.report.per_segment}
    assert all(seg_b[k] == v for k, v in seg_a.items())
    # packet ids shift as new packets interleave, but every old (send, deliver) pair survives
    assert not Counter(r[1:] for r in a.ledger) - Counter(r[1:] for r in b.ledger)


def test_scenario_outputs_written(tmp_path):
    out = scenario("baseline")
    names = sorted(p.name for p in out.write(tmp_path))
    assert names == ["alarms.jsonl", "flows.jsonl", "ledger.csv", "mesh.jsonl", "report.json"]
    first = json.loads((tmp_path / "mesh.jsonl").read_text().splitlines()[0])
    assert {"ts_us", "sender", "receiver", "seq", "kind", "event"} <= set(first)
    assert (tmp_path / "ledger.csv").read_text().startswith("packet_id,send_ts_us,deliver_ts_us\n")
    off = scenario("baseline", monitoring=False)
    assert [p.name for p in off.write(tmp_path / "off")] == ["ledger.csv"]


def test_collector_outage_raises_delivery_failures():
    out = scenario("collector_outage")
    fails = [a for a in out.alarms if a.kind == "delivery_failure"]
    assert fails and {a.obs_point for a in fails} == {"c2"}
