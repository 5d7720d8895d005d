"""Global flow view, hierarchical roll-up and the network-wide report.

Several taps (switch mirror ports, gateways) see the same packets, so the
view never sums counters across observation points: each observation point
keeps its own counters and the canonical value is the maximum over them.
Within one observation point, distinct exported records (identified by
their first timestamp) are summed, and re-delivery of the same record is
absorbed by taking the field-wise maximum.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from ipaddress import IPv4Address
from typing import Callable, Iterable, Optional

from .capture import PROTO_TCP, TCP_SYN
from .detect import Alarm, alarm_to_dict, distinct_ports
from .flows import FlowKey, FlowRecord, compression_ratio


class UnknownChild(KeyError):
    pass


class CyclicAggregatorTree(ValueError):
    pass


@dataclass(frozen=True)
class Counters:
    fwd_pkts: int = 0
    fwd_bytes: int = 0
    rev_pkts: int = 0
    rev_bytes: int = 0
    flags_fwd: int = 0
    flags_rev: int = 0

    @classmethod
    def of(cls, rec: FlowRecord) -> "Counters":
        return cls(rec.fwd_pkts, rec.fwd_bytes, rec.rev_pkts, rec.rev_bytes,
                   rec.tcp_flags_fwd, rec.tcp_flags_rev)

    def max(self, o: "Counters") -> "Counters":
        return Counters(max(self.fwd_pkts, o.fwd_pkts), max(self.fwd_bytes, o.fwd_bytes),
                        max(self.rev_pkts, o.rev_pkts), max(self.rev_bytes, o.rev_bytes),
                        self.flags_fwd | o.flags_fwd, self.flags_rev | o.flags_rev)

    def __add__(self, o: "Counters") -> "Counters":
        return Counters(self.fwd_pkts + o.fwd_pkts, self.fwd_bytes + o.fwd_bytes,
                        self.rev_pkts + o.rev_pkts, self.rev_bytes + o.rev_bytes,
                        self.flags_fwd | o.flags_fwd, self.flags_rev | o.flags_rev)

    @property
    def pkts(self) -> int:
        return self.fwd_pkts + self.rev_pkts

    @property
    def bytes(self) -> int:
        return self.fwd_bytes + self.rev_bytes


# (obs_point, first_ts) -> (last_ts, counters)
Segments = dict[tuple[str, int], tuple[int, Counters]]


@dataclass
class GlobalFlow:
    key: FlowKey
    initiator_is_lo: bool
    first_ts: int
    last_ts: int
    segments: Segments = field(default_factory=dict)

    @property
    def per_obs(self) -> dict[str, Counters]:
        out: dict[str, Counters] = {}
        for (obs, _), (_, c) in sorted(self.segments.items()):
            out[obs] = out[obs] + c if obs in out else c
        return out

    @property
    def canonical(self) -> Counters:
        it = iter(self.per_obs.values())
        acc = next(it)
        for c in it:
            acc = acc.max(c)
        return acc

    def initiator(self) -> IPv4Address:
        return self.key.ip_lo if self.initiator_is_lo else self.key.ip_hi

    def responder(self) -> tuple[IPv4Address, int]:
        k = self.key
        return (k.ip_hi, k.port_hi) if self.initiator_is_lo else (k.ip_lo, k.port_lo)

    def snapshot(self) -> tuple:
        return (self.key, self.initiator_is_lo, self.first_ts, self.last_ts,
                tuple(sorted(self.segments.items())))


def _merge_segments(into: Segments, new: Segments) -> None:
    for ident, (last, c) in new.items():
        if ident in into:
            old_last, old_c = into[ident]
            into[ident] = (max(old_last, last), old_c.max(c))
        else:
            into[ident] = (last, c)


class FlowView:
    """Deduplicated set of GlobalFlows."""

    def __init__(self, idle_timeout_us: int = 15_000_000):
        self.idle_timeout_us = idle_timeout_us
        self._flows: dict[tuple[FlowKey, bool], list[GlobalFlow]] = {}

    def __len__(self) -> int:
        return sum(len(v) for v in self._flows.values())

    def __iter__(self):
        return iter(self.flows())

    def __eq__(self, other) -> bool:
        if not isinstance(other, FlowView):
            return NotImplemented
        return self.snapshot() == other.snapshot()

    def flows(self) -> list[GlobalFlow]:
        out = [g for lst in self._flows.values() for g in lst]
        out.sort(key=lambda g: (g.first_ts, g.key, g.initiator_is_lo))
        return out

    def snapshot(self) -> list[tuple]:
        return sorted(g.snapshot() for g in self.flows())

    def copy(self) -> "FlowView":
        v = FlowView(self.idle_timeout_us)
        v._flows = {k: [GlobalFlow(g.key, g.initiator_is_lo, g.first_ts, g.last_ts, dict(g.segments))
                        for g in lst] for k, lst in self._flows.items()}
        return v

    def _absorb(self, key: FlowKey, initiator_is_lo: bool, first: int, last: int,
                segments: Segments) -> None:
        lst = self._flows.setdefault((key, initiator_is_lo), [])
        idle = self.idle_timeout_us
        # a record may bridge several existing flows; they all collapse into one
        hits = [g for g in lst if max(g.first_ts, first) - min(g.last_ts, last) <= idle]
        merged = GlobalFlow(key, initiator_is_lo, first, last, {})
        for g in hits:
            merged.first_ts = min(merged.first_ts, g.first_ts)
            merged.last_ts = max(merged.last_ts, g.last_ts)
            _merge_segments(merged.segments, g.segments)
            lst.remove(g)
        _merge_segments(merged.segments, segments)
        lst.append(merged)
        lst.sort(key=lambda g: g.first_ts)

    def add_record(self, rec: FlowRecord) -> None:
        self._absorb(rec.key, rec.initiator_is_lo, rec.first_ts, rec.last_ts,
                     {(rec.obs_point, rec.first_ts): (rec.last_ts, Counters.of(rec))})

    def add_global(self, g: GlobalFlow) -> None:
        self._absorb(g.key, g.initiator_is_lo, g.first_ts, g.last_ts, dict(g.segments))

    def merge(self, batch: Iterable[FlowRecord]) -> "FlowView":
        for rec in batch:
            self.add_record(rec)
        return self

    @property
    def record_count(self) -> int:
        """Distinct collector records folded into the view."""
        return sum(len(g.segments) for g in self.flows())

    @property
    def observed_pkts(self) -> int:
        return sum(c.pkts for g in self.flows() for _, c in g.segments.values())


def merge_flows(view: FlowView, batch: Iterable[FlowRecord]) -> FlowView:
    """Return a new view with ``batch`` merged in; ``view`` is left untouched."""
    return view.copy().merge(batch)


def is_contact(g: GlobalFlow) -> bool:
    return g.key.protocol != PROTO_TCP or bool(g.canonical.flags_fwd & TCP_SYN)


def global_scan_detect(view: FlowView, window_s: float = 10, global_threshold: int = 25,
                       obs_point: str = "aggregator") -> list[Alarm]:
    """Distinct destination ports per source across all segments, per aligned window."""
    w = round(window_s * 1_000_000)
    contacts: dict[tuple[int, IPv4Address], set] = {}
    for g in view.flows():
        if not is_contact(g):
            continue
        contacts.setdefault((g.first_ts // w, g.initiator()), set()).add(g.responder())
    out = []
    for (win, src), pairs in sorted(contacts.items()):
        n = distinct_ports(pairs)
        if n > global_threshold:
            out.append(Alarm((win + 1) * w, obs_point, "global_scan", str(src), float(n), 0.0,
                             float(global_threshold), win))
    return out


# -- aggregator tree ------------------------------------------------------------------

@dataclass
class AggregatorNode:
    id: str
    children: set[str] = field(default_factory=set)
    parent: Optional[str] = None


def check_tree(nodes: Iterable[AggregatorNode]) -> str:
    """Validate the aggregator graph is a single-rooted tree; return the root id."""
    nodes = {n.id: n for n in nodes}
    roots = sorted(n.id for n in nodes.values() if n.parent is None)
    for n in nodes.values():
        if n.parent is not None and n.parent not in nodes:
            raise CyclicAggregatorTree(f"{n.id}: parent {n.parent} is not an aggregator")
        if n.parent is not None and n.id not in nodes[n.parent].children:
            raise CyclicAggregatorTree(f"{n.id}: not listed as child of {n.parent}")
    for n in nodes.values():
        seen = {n.id}
        p = n.parent
        while p is not None:
            if p in seen:
                raise CyclicAggregatorTree(f"cycle through {p}")
            seen.add(p)
            p = nodes[p].parent
    if len(roots) != 1:
        raise CyclicAggregatorTree(f"expected exactly one root aggregator, found {roots}")
    return roots[0]


@dataclass
class ExportLedger:
    """Which export cycles arrived from which collector."""
    interval_us: int = 30_000_000
    expected: dict[str, int] = field(default_factory=dict)  # collector -> cycles due
    received: dict[str, set[int]] = field(default_factory=dict)

    def expect(self, collector: str, n_cycles: int) -> None:
        self.expected[collector] = max(n_cycles, self.expected.get(collector, 0))
        self.received.setdefault(collector, set())

    def record(self, collector: str, cycle: int) -> None:
        self.received.setdefault(collector, set()).add(cycle)

    def merge(self, other: "ExportLedger") -> None:
        for c, n in other.expected.items():
            self.expect(c, n)
        for c, cycles in other.received.items():
            self.received.setdefault(c, set()).update(cycles)

    def gaps(self, min_run: int = 2) -> list[dict]:
        out = []
        for coll in sorted(self.expected):
            got = self.received.get(coll, set())
            run: list[int] = []
            for cyc in range(1, self.expected[coll] + 2):
                if cyc <= self.expected[coll] and cyc not in got:
                    run.append(cyc)
                    continue
                if len(run) >= min_run:
                    out.append({"collector": coll, "cycles": run})
                run = []
        return out


def gap_alarms(ledger: ExportLedger, obs_point: str = "aggregator", min_run: int = 2) -> list[Alarm]:
    return [Alarm(g["cycles"][-1] * ledger.interval_us, obs_point, "coverage_gap", g["collector"],
                  float(len(g["cycles"])), 0.0, float(min_run), g["cycles"][0])
            for g in ledger.gaps(min_run)]


class Aggregator:
    def __init__(self, node: AggregatorNode, idle_timeout_us: int = 15_000_000,
                 interval_us: int = 30_000_000):
        self.node = node
        self.view = FlowView(idle_timeout_us)
        self.ledger = ExportLedger(interval_us)
        self.alarms: list[Alarm] = []

    @property
    def id(self) -> str:
        return self.node.id

    def receive_batch(self, collector: str, cycle: int, batch: Iterable[FlowRecord]) -> None:
        self.view.merge(batch)
        self.ledger.record(collector, cycle)

    def roll_up(self, child_id: str, summary: "Aggregator | FlowView") -> "Aggregator":
        if child_id not in self.node.children:
            raise UnknownChild(child_id)
        view = summary.view if isinstance(summary, Aggregator) else summary
        for g in view.flows():
            self.view.add_global(g)
        if isinstance(summary, Aggregator):
            self.ledger.merge(summary.ledger)
            known = set(self.alarms)
            self.alarms += [a for a in summary.alarms if a not in known]
        return self


def roll_up(parent: Aggregator, child_id: str, summary) -> Aggregator:
    return parent.roll_up(child_id, summary)


# -- report -----------------------------------------------------------------------------

@dataclass
class GlobalReport:
    range_us: Optional[list[int]]
    flow_count: int
    per_segment: list[dict]
    totals: dict
    compression_ratio: Optional[float]
    alarms: list[Alarm]
    coverage_gaps: list[dict]
    top_talkers: list[dict]

    def to_dict(self) -> dict:
        return {
            "range_us": self.range_us,
            "flow_count": self.flow_count,
            "per_segment": self.per_segment,
            "totals": self.totals,
            "compression_ratio": self.compression_ratio,
            "alarms": [alarm_to_dict(a) for a in self.alarms],
            "coverage_gaps": self.coverage_gaps,
            "top_talkers": self.top_talkers,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _first_obs(g: GlobalFlow) -> str:
    return min(g.per_obs)


def build_report(view: FlowView, alarms: Iterable[Alarm], ledger: Optional[ExportLedger] = None,
                 *, segment_of: Callable[[GlobalFlow], str] = _first_obs, top_n: int = 10,
                 obs_point: str = "aggregator") -> GlobalReport:
    """Summarize a view. Every flow is attributed to exactly one segment."""
    flows = view.flows()
    per_seg: dict[str, list[int]] = {}
    talkers: dict[IPv4Address, int] = {}
    tot_pkts = tot_bytes = 0
    for g in flows:
        c = g.canonical
        seg = per_seg.setdefault(segment_of(g), [0, 0])
        seg[0] += c.pkts
        seg[1] += c.bytes
        tot_pkts += c.pkts
        tot_bytes += c.bytes
        src = g.initiator()
        dst = g.responder()[0]
        talkers[src] = talkers.get(src, 0) + c.fwd_bytes
        talkers[dst] = talkers.get(dst, 0) + c.rev_bytes

    all_alarms = list(alarms)
    gaps: list[dict] = []
    if ledger is not None:
        gaps = ledger.gaps()
        all_alarms += gap_alarms(ledger, obs_point)
    all_alarms.sort(key=Alarm.sort_key)

    observed = view.observed_pkts
    ratio = compression_ratio(observed, view.record_count) if observed else None
    top = sorted(talkers.items(), key=lambda kv: (-kv[1], kv[0]))[:top_n]
    return GlobalReport(
        range_us=[min(g.first_ts for g in flows), max(g.last_ts for g in flows)] if flows else None,
        flow_count=len(flows),
        per_segment=[{"segment": s, "pkts": v[0], "bytes": v[1]} for s, v in sorted(per_seg.items())],
        totals={"pkts": tot_pkts, "bytes": tot_bytes},
        compression_ratio=ratio,
        alarms=all_alarms,
        coverage_gaps=gaps,
        top_talkers=[{"ip": str(ip), "bytes": b} for ip, b in top],
    )
