"""End-to-end scenario run: production network, taps, collectors, mesh, aggregators.

The production network and the monitoring plane share one event queue but
nothing else. Production hops are scheduled only by ``ProductionNetwork``;
collectors receive immutable copies of packets at switch/gateway traversal
and hand their output to the mesh, which has its own graph.
"""
from __future__ import annotations

import csv
import io
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from ..aggregate import Aggregator, GlobalFlow, GlobalReport, build_report, global_scan_detect
from ..capture import ETHERTYPE_IPV4, IPv4Info, L4Info, PacketRecord, mac_for_ip
from ..detect import Alarm, LocalDetector, WindowFeatures, alarm_from_dict, alarm_to_dict, alarms_to_jsonl
from ..events import EventQueue
from ..flows import FlowRecord, FlowTable, flow_from_dict, flows_to_jsonl
from ..mesh import MeshChannel, MeshEnvelope
from .config import TopologyConfig
from .prng import SplitMix64
from .traffic import ProdPacket, TrafficProfile, check_profile_duration, generate_traffic


class InvariantViolation(AssertionError):
    pass


class ProductionNetwork:
    """Store-and-forward production network with fixed per-link latency, no loss."""

    def __init__(self, config: TopologyConfig, queue: EventQueue,
                 tap: Optional[Callable[[str, ProdPacket, int], None]] = None):
        self.queue = queue
        self.tap = tap
        self.hosts = config.hosts
        self.lat_host = config.links.host_switch_us
        self.lat_gw = config.links.switch_gateway_us
        self.switch_of = {s.id: s.switch for s in config.segments}
        self.tapped = {s.switch: s.collector for s in config.segments}
        self.tapped.update({g.id: g.collector for g in config.gateways})
        self.elements = set(self.hosts) | set(self.switch_of.values()) | {g.id for g in config.gateways}
        self._gw_adj: dict[str, list[tuple[str, str]]] = {}
        for g in sorted(config.gateways, key=lambda g: g.id):
            a, b = g.connects
            self._gw_adj.setdefault(a, []).append((g.id, b))
            self._gw_adj.setdefault(b, []).append((g.id, a))
        self._paths: dict[tuple[str, str], list[str]] = {}
        self.ledger: dict[int, tuple[int, int]] = {}
        self.hop_events = 0

    def path(self, src: str, dst: str) -> list[str]:
        """Element path host -> switch (-> gateway -> switch)* -> host."""
        key = (src, dst)
        if key not in self._paths:
            sa = self.switch_of[self.hosts[src].segment]
            sb = self.switch_of[self.hosts[dst].segment]
            prev = {sa: None}
            q = deque([sa])
            while q:
                u = q.popleft()
                for gw, v in self._gw_adj.get(u, []):
                    if v not in prev:
                        prev[v] = (gw, u)
                        q.append(v)
            if sb not in prev:
                raise InvariantViolation(f"no production path {src} -> {dst}")
            mid = [sb]
            node = sb
            while prev[node] is not None:
                gw, node = prev[node]
                mid += [gw, node]
            self._paths[key] = [src] + mid[::-1] + [dst]
        return self._paths[key]

    def _lat(self, a: str, b: str) -> int:
        return self.lat_host if a in self.hosts or b in self.hosts else self.lat_gw

    def path_latency(self, pkt: ProdPacket) -> int:
        p = self.path(pkt.src_host, pkt.dst_host)
        return sum(self._lat(a, b) for a, b in zip(p, p[1:]))

    def start(self, packets: list[ProdPacket]) -> None:
        """Schedule each packet to leave its source host at its send time."""
        for pkt in packets:
            self.queue.schedule(pkt.ts_us, self.inject, pkt, domain="production", origin=pkt.src_host)

    def inject(self, pkt: ProdPacket) -> None:
        self._forward(pkt, self.path(pkt.src_host, pkt.dst_host), 0)

    def _forward(self, pkt: ProdPacket, path: list[str], i: int) -> None:
        a, b = path[i], path[i + 1]
        self.hop_events += 1
        self.queue.schedule(self.queue.now + self._lat(a, b), self._arrive, pkt, path, i + 1, a,
                            domain="production", origin=a)

    def _arrive(self, pkt: ProdPacket, path: list[str], i: int, origin: str) -> None:
        if origin not in self.elements:
            raise InvariantViolation(f"production hop originated at non-production node {origin}")
        node = path[i]
        if self.tap is not None and node in self.tapped:
            self.tap(self.tapped[node], pkt, self.queue.now)
        if i == len(path) - 1:
            self.ledger[pkt.packet_id] = (pkt.ts_us, self.queue.now)
        else:
            self._forward(pkt, path, i)


def tap_record(pkt: ProdPacket, collector: str, ts_us: int) -> PacketRecord:
    """Read-only mirror copy of a production packet as the collector sees it."""
    l4 = L4Info(pkt.src_port, pkt.dst_port, pkt.tcp_flags if pkt.protocol == 6 else 0)
    ip = IPv4Info(pkt.src_ip, pkt.dst_ip, pkt.protocol, pkt.wire_len - 14)
    return PacketRecord(ts_us, collector, mac_for_ip(pkt.src_ip), mac_for_ip(pkt.dst_ip),
                        ETHERTYPE_IPV4, ip, l4, pkt.wire_len, False)


def encode_batch(collector: str, cycle: int, flows: list[FlowRecord]) -> bytes:
    head = json.dumps({"collector": collector, "cycle": cycle, "count": len(flows)}) + "\n"
    return (head + flows_to_jsonl(flows)).encode()


def decode_batch(payload: bytes) -> tuple[str, int, list[FlowRecord]]:
    lines = payload.decode().splitlines()
    head = json.loads(lines[0])
    return head["collector"], head["cycle"], [flow_from_dict(json.loads(l)) for l in lines[1:] if l]


class Collector:
    def __init__(self, cid: str, parent: str, config: TopologyConfig):
        self.id = cid
        self.parent = parent
        self.table = FlowTable(config.flow, cid)
        self.detector = LocalDetector(cid, config.detector)
        self.window_us = config.detector.window_us
        self.capture: list[PacketRecord] = []
        self.flows: list[FlowRecord] = []
        self.outbox: list[FlowRecord] = []
        self.alarms: list[Alarm] = []
        self._windows: dict[int, WindowFeatures] = {}

    def observe(self, rec: PacketRecord) -> None:
        self.capture.append(rec)
        exported = self.table.update(rec)
        self.flows += exported
        self.outbox += exported
        idx = rec.ts_micros // self.window_us
        win = self._windows.get(idx)
        if win is None:
            win = self._windows[idx] = WindowFeatures(idx, self.id)
        win.add_packet(rec)

    def close_windows(self, before: Optional[int]) -> list[Alarm]:
        out = []
        for idx in sorted(self._windows):
            if before is not None and idx >= before:
                break
            out += self.detector.process(self._windows.pop(idx))
        self.alarms += out
        return out

    def take_export(self, now: int, final: bool) -> list[FlowRecord]:
        exported = self.table.flush(now) if final else self.table.expire(now)
        self.flows += exported
        batch = self.outbox + exported
        self.outbox = []
        return batch


@dataclass
class RunOutputs:
    ledger: list[tuple[int, int, int]]
    captures: dict[str, list[PacketRecord]] = field(default_factory=dict)
    flows: dict[str, list[FlowRecord]] = field(default_factory=dict)
    alarms: list[Alarm] = field(default_factory=list)
    report: Optional[GlobalReport] = None
    mesh_log: list[dict] = field(default_factory=list)
    delivered_batches: list[tuple[str, int, bytes]] = field(default_factory=list)
    aggregators: dict[str, Aggregator] = field(default_factory=dict)
    production_origins: dict[str, int] = field(default_factory=dict)
    non_production_origins: dict[str, int] = field(default_factory=dict)
    mesh_transmissions: int = 0
    envelopes_sent: int = 0
    n_cycles: int = 0
    end_us: int = 0

    def ledger_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["packet_id", "send_ts_us", "deliver_ts_us"])
        w.writerows(self.ledger)
        return buf.getvalue()

    def flows_jsonl(self) -> str:
        return "".join(flows_to_jsonl(v) for v in self.flows.values())

    def alarms_jsonl(self) -> str:
        return alarms_to_jsonl(self.alarms)

    def mesh_jsonl(self) -> str:
        return "".join(json.dumps(e) + "\n" for e in self.mesh_log)

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {"ledger.csv": self.ledger_csv()}
        if self.report is not None:
            files.update({"flows.jsonl": self.flows_jsonl(), "alarms.jsonl": self.alarms_jsonl(),
                          "report.json": self.report.to_json(), "mesh.jsonl": self.mesh_jsonl()})
        written = []
        for name, text in files.items():
            (out / name).write_text(text)
            written.append(out / name)
        return written


def run_scenario(config: TopologyConfig, profile: TrafficProfile, duration_s: float, *,
                 monitoring: bool = True, seed: Optional[int] = None) -> RunOutputs:
    """Simulate ``duration_s`` seconds of the scenario; pure function of its inputs."""
    check_profile_duration(profile, duration_s)
    prng = SplitMix64(config.seed if seed is None else seed)
    packets = generate_traffic(profile, prng, duration_s, config.hosts)

    queue = EventQueue()
    collectors: dict[str, Collector] = {}

    def on_tap(cid: str, pkt: ProdPacket, now: int) -> None:
        collectors[cid].observe(tap_record(pkt, cid, now))

    prod = ProductionNetwork(config, queue, on_tap if monitoring else None)
    prod.start(packets)

    end_us = round(duration_s * 1_000_000)
    if packets:
        end_us = max(end_us, max(p.ts_us + prod.path_latency(p) for p in packets))

    out = RunOutputs(ledger=[])
    channel = None
    if monitoring:
        channel = _setup_monitoring(config, profile, queue, prng, collectors, end_us, out)

    queue.run()

    out.ledger = [(pid, s, d) for pid, (s, d) in sorted(prod.ledger.items())]
    for (domain, origin), n in sorted(queue.scheduled.items()):
        target = out.production_origins if domain == "production" else out.non_production_origins
        target[origin] = target.get(origin, 0) + n
    if not set(out.production_origins) <= prod.elements:
        raise InvariantViolation("production events scheduled by non-production elements")
    if channel is not None:
        _finish(config, collectors, channel, out)
    return out


def _setup_monitoring(config: TopologyConfig, profile: TrafficProfile, queue: EventQueue, prng,
                      collectors: dict[str, Collector], end_us: int, out: RunOutputs) -> MeshChannel:
    parent = config.collector_parent()
    for cid in config.collectors:
        collectors[cid] = Collector(cid, parent[cid], config)
    interval = round(config.reliability.export_interval_s * 1_000_000)
    idle = config.flow.idle_us
    aggs = {a.id: Aggregator(a, idle, interval) for a in config.aggregators}
    n_cycles = max(1, math.ceil(end_us / interval))
    for cid, c in collectors.items():
        aggs[c.parent].ledger.expect(cid, n_cycles)
    out.aggregators = aggs
    out.n_cycles = n_cycles
    out.end_us = end_us

    def on_deliver(env: MeshEnvelope) -> None:
        agg = aggs[env.receiver]
        if env.kind == "flow_batch":
            cid, cycle, batch = decode_batch(env.payload)
            agg.receive_batch(cid, cycle, batch)
            out.delivered_batches.append((cid, cycle, env.payload))
        elif env.kind == "alarm_msg":
            agg.alarms.append(alarm_from_dict(json.loads(env.payload)))

    def on_failure(env: MeshEnvelope, attempts: int) -> None:
        c = collectors.get(env.sender)
        if c is None:
            return
        c.alarms.append(Alarm(queue.now, c.id, "delivery_failure", f"{env.receiver}#{env.seq}",
                              float(attempts), 0.0, float(config.reliability.max_retries), env.seq))

    channel = MeshChannel(config.mesh.copy(), config.reliability, prng, queue, on_deliver, on_failure)

    def send_alarms(c: Collector, alarms: list[Alarm]) -> None:
        for a in alarms:
            out.envelopes_sent += 1
            channel.send(c.id, c.parent, "alarm_msg", json.dumps(alarm_to_dict(a)).encode())

    def window_tick(k: Optional[int]) -> None:
        for c in collectors.values():
            send_alarms(c, c.close_windows(k))

    def export_tick(cycle: int, final: bool) -> None:
        for c in collectors.values():
            if final:
                send_alarms(c, c.close_windows(None))
            batch = c.take_export(queue.now, final)
            out.envelopes_sent += 1
            channel.send(c.id, c.parent, "flow_batch", encode_batch(c.id, cycle, batch))

    w = config.detector.window_us
    ticks: list[tuple[int, int, Callable, tuple]] = []
    # at equal times: topology changes first, then window close, then export
    for ev in profile.events:
        ticks.append((round(ev.t_s * 1_000_000), 0, channel.apply, (ev.event,)))
    for k in range(1, end_us // w + 1):
        ticks.append((k * w, 1, window_tick, (k,)))
    for cyc in range(1, n_cycles):
        ticks.append((cyc * interval, 2, export_tick, (cyc, False)))
    ticks.append((end_us, 2, export_tick, (n_cycles, True)))
    for ts, _, fn, args in sorted(ticks, key=lambda t: (t[0], t[1])):
        queue.schedule(ts, fn, *args, domain="monitor", origin="scheduler")
    return channel


def _finish(config: TopologyConfig, collectors: dict[str, Collector], channel: MeshChannel,
            out: RunOutputs) -> None:
    out.mesh_log = channel.log
    out.mesh_transmissions = channel.transmissions
    out.captures = {cid: c.capture for cid, c in collectors.items()}
    out.flows = {cid: c.flows for cid, c in collectors.items()}

    aggs = out.aggregators
    root_id = config.root_aggregator

    def fold(aid: str) -> Aggregator:
        agg = aggs[aid]
        for child in sorted(agg.node.children):
            if child in aggs:
                agg.roll_up(child, fold(child))
        return agg

    root = fold(root_id)
    host_seg = {h.ip: h.segment for h in config.hosts.values()}
    coll_seg = config.segment_of_collector()

    def segment_of(g: GlobalFlow) -> str:
        seg = host_seg.get(g.initiator())
        if seg is None:
            seg = coll_seg.get(min(g.per_obs), "unknown")
        return seg

    global_alarms = global_scan_detect(root.view, config.detector.window_s, obs_point=root_id)
    report = build_report(root.view, root.alarms + global_alarms, root.ledger,
                          segment_of=segment_of, obs_point=root_id)
    out.report = report
    everything = set(report.alarms)
    for c in collectors.values():
        everything.update(c.alarms)
    out.alarms = sorted(everything, key=Alarm.sort_key)
