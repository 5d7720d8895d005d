"""Bidirectional flow table with idle/active timeout export."""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass
from ipaddress import IPv4Address
from typing import Iterable, Iterator

from .capture import PROTO_TCP, PacketRecord

IDLE_TIMEOUT = "idle_timeout"
ACTIVE_TIMEOUT = "active_timeout"
FLUSH = "flush"
EXPORT_REASONS = (IDLE_TIMEOUT, ACTIVE_TIMEOUT, FLUSH)


class NoIpLayer(ValueError):
    pass


class OutOfOrderTimestamp(ValueError):
    pass


class ZeroPackets(ValueError):
    pass


@dataclass(frozen=True, order=True)
class FlowKey:
    ip_lo: IPv4Address
    port_lo: int
    ip_hi: IPv4Address
    port_hi: int
    protocol: int


@dataclass(frozen=True)
class FlowRecord:
    key: FlowKey
    initiator_is_lo: bool
    first_ts: int
    last_ts: int
    fwd_pkts: int
    fwd_bytes: int
    rev_pkts: int
    rev_bytes: int
    tcp_flags_fwd: int
    tcp_flags_rev: int
    obs_point: str
    export_reason: str

    @property
    def pkts(self) -> int:
        return self.fwd_pkts + self.rev_pkts

    @property
    def bytes(self) -> int:
        return self.fwd_bytes + self.rev_bytes

    def initiator(self) -> tuple[IPv4Address, int]:
        k = self.key
        return (k.ip_lo, k.port_lo) if self.initiator_is_lo else (k.ip_hi, k.port_hi)

    def responder(self) -> tuple[IPv4Address, int]:
        k = self.key
        return (k.ip_hi, k.port_hi) if self.initiator_is_lo else (k.ip_lo, k.port_lo)


@dataclass
class FlowTableConfig:
    idle_timeout_s: float = 15
    active_timeout_s: float = 300

    def __post_init__(self):
        if not 0 < self.idle_timeout_s <= self.active_timeout_s:
            raise ValueError("need 0 < idle_timeout_s <= active_timeout_s")

    @property
    def idle_us(self) -> int:
        return round(self.idle_timeout_s * 1_000_000)

    @property
    def active_us(self) -> int:
        return round(self.active_timeout_s * 1_000_000)


def canonical_key(packet: PacketRecord) -> tuple[FlowKey, bool]:
    """Return the direction-independent key and whether the source is the lo endpoint."""
    ip = packet.ip
    if ip is None:
        raise NoIpLayer("packet has no IPv4 section")
    if packet.l4 is not None:
        sport, dport = packet.l4.src_port, packet.l4.dst_port
    else:
        sport = dport = 0
    src = (ip.src_ip, sport)
    dst = (ip.dst_ip, dport)
    if src <= dst:
        return FlowKey(src[0], src[1], dst[0], dst[1], ip.protocol), True
    return FlowKey(dst[0], dst[1], src[0], src[1], ip.protocol), False


def _sort_key(rec: FlowRecord):
    return (rec.first_ts, rec.key, rec.initiator_is_lo)


class _LiveFlow:
    __slots__ = ("key", "initiator_is_lo", "first_ts", "last_ts", "fwd_pkts", "fwd_bytes",
                 "rev_pkts", "rev_bytes", "flags_fwd", "flags_rev", "obs_point")

    def __init__(self, key: FlowKey, initiator_is_lo: bool, ts: int, obs_point: str):
        self.key = key
        self.initiator_is_lo = initiator_is_lo
        self.first_ts = self.last_ts = ts
        self.fwd_pkts = self.fwd_bytes = self.rev_pkts = self.rev_bytes = 0
        self.flags_fwd = self.flags_rev = 0
        self.obs_point = obs_point

    def add(self, packet: PacketRecord, src_is_lo: bool) -> None:
        self.last_ts = packet.ts_micros
        flags = packet.l4.tcp_flags if packet.l4 is not None and self.key.protocol == PROTO_TCP else 0
        if src_is_lo == self.initiator_is_lo:
            self.fwd_pkts += 1
            self.fwd_bytes += packet.wire_len
            self.flags_fwd |= flags
        else:
            self.rev_pkts += 1
            self.rev_bytes += packet.wire_len
            self.flags_rev |= flags

    def export(self, reason: str) -> FlowRecord:
        return FlowRecord(self.key, self.initiator_is_lo, self.first_ts, self.last_ts,
                          self.fwd_pkts, self.fwd_bytes, self.rev_pkts, self.rev_bytes,
                          self.flags_fwd, self.flags_rev, self.obs_point, reason)


class FlowTable:
    """Flow cache for one observation point.

    Eviction is driven by packet time (and explicit ``expire``/``flush``
    calls), never by wall-clock timers.
    """

    def __init__(self, config: FlowTableConfig | None = None, obs_point: str = ""):
        self.config = config or FlowTableConfig()
        self.obs_point = obs_point
        self.clock = 0
        # insertion order == creation order == ascending first_ts
        self._live: dict[FlowKey, _LiveFlow] = {}
        # move_to_end on every update keeps this in ascending last_ts order
        self._by_last: OrderedDict[FlowKey, _LiveFlow] = OrderedDict()

    def __len__(self) -> int:
        return len(self._live)

    def _evict(self, key: FlowKey) -> _LiveFlow:
        self._by_last.pop(key)
        return self._live.pop(key)

    def expire(self, now: int) -> list[FlowRecord]:
        """Advance the table clock to ``now`` and export every timed-out flow."""
        if now < self.clock:
            raise OutOfOrderTimestamp(f"time {now} is before table clock {self.clock}")
        self.clock = now
        idle, active = self.config.idle_us, self.config.active_us
        out = []
        while self._by_last:
            flow = next(iter(self._by_last.values()))
            if flow.last_ts + idle >= now:
                break
            out.append(self._evict(flow.key).export(IDLE_TIMEOUT))
        while self._live:
            flow = next(iter(self._live.values()))
            if flow.first_ts + active > now:
                break
            out.append(self._evict(flow.key).export(ACTIVE_TIMEOUT))
        out.sort(key=_sort_key)
        return out

    def update(self, packet: PacketRecord) -> list[FlowRecord]:
        key, src_is_lo = canonical_key(packet)
        out = self.expire(packet.ts_micros)
        flow = self._live.get(key)
        if flow is None:
            flow = _LiveFlow(key, src_is_lo, packet.ts_micros, packet.obs_point or self.obs_point)
            self._live[key] = flow
            self._by_last[key] = flow
        else:
            self._by_last.move_to_end(key)
        flow.add(packet, src_is_lo)
        return out

    def flush(self, now: int | None = None) -> list[FlowRecord]:
        if now is not None:
            if now < self.clock:
                raise OutOfOrderTimestamp(f"flush time {now} is before table clock {self.clock}")
            self.clock = now
        out = sorted((f.export(FLUSH) for f in self._live.values()), key=_sort_key)
        self._live.clear()
        self._by_last.clear()
        return out


def flow_update(table: FlowTable, packet: PacketRecord) -> list[FlowRecord]:
    return table.update(packet)


def flush(table: FlowTable, now_micros: int | None = None) -> list[FlowRecord]:
    return table.flush(now_micros)


def build_flows(packets: Iterable[PacketRecord], config: FlowTableConfig | None = None,
                obs_point: str = "") -> list[FlowRecord]:
    """Run a packet sequence through a fresh table and flush at the end.

    Packets without an IPv4 section are skipped.
    """
    table = FlowTable(config, obs_point)
    out: list[FlowRecord] = []
    for pkt in packets:
        if pkt.ip is None:
            continue
        out.extend(table.update(pkt))
    out.extend(table.flush())
    return out


def compression_ratio(packet_count: int, flow_count: int) -> float:
    if packet_count <= 0:
        raise ZeroPackets("compression ratio undefined for zero packets")
    if not 1 <= flow_count <= packet_count:
        raise ValueError(f"need 1 <= flow_count <= packet_count, got {flow_count}/{packet_count}")
    return flow_count / packet_count


# -- JSONL ------------------------------------------------------------------

def flow_to_dict(rec: FlowRecord) -> dict:
    k = rec.key
    return {
        "ts_first_us": rec.first_ts,
        "ts_last_us": rec.last_ts,
        "ip_lo": str(k.ip_lo),
        "ip_hi": str(k.ip_hi),
        "port_lo": k.port_lo,
        "port_hi": k.port_hi,
        "proto": k.protocol,
        "initiator_is_lo": rec.initiator_is_lo,
        "fwd_pkts": rec.fwd_pkts,
        "fwd_bytes": rec.fwd_bytes,
        "rev_pkts": rec.rev_pkts,
        "rev_bytes": rec.rev_bytes,
        "flags_fwd": rec.tcp_flags_fwd,
        "flags_rev": rec.tcp_flags_rev,
        "obs_point": rec.obs_point,
        "reason": rec.export_reason,
    }


def flow_from_dict(d: dict) -> FlowRecord:
    key = FlowKey(IPv4Address(d["ip_lo"]), int(d["port_lo"]), IPv4Address(d["ip_hi"]),
                  int(d["port_hi"]), int(d["proto"]))
    if d["reason"] not in EXPORT_REASONS:
        raise ValueError(f"unknown export reason {d['reason']!r}")
    return FlowRecord(key, bool(d["initiator_is_lo"]), int(d["ts_first_us"]), int(d["ts_last_us"]),
                      int(d["fwd_pkts"]), int(d["fwd_bytes"]), int(d["rev_pkts"]),
                      int(d["rev_bytes"]), int(d["flags_fwd"]), int(d["flags_rev"]),
                      str(d["obs_point"]), d["reason"])


def flow_to_json(rec: FlowRecord) -> str:
    return json.dumps(flow_to_dict(rec))


def flows_to_jsonl(records: Iterable[FlowRecord]) -> str:
    return "".join(flow_to_json(r) + "\n" for r in records)


def iter_flows_jsonl(lines: Iterable[str]) -> Iterator[FlowRecord]:
    for line in lines:
        line = line.strip()
        if line:
            yield flow_from_dict(json.loads(line))
