"""Traffic profiles and deterministic production packet generation.

PRNG draw schedule: baseline sessions sorted by (client, server,
server_port), one jitter draw per request occurrence in time order.
Attack generators draw nothing. Adding sessions whose client ids sort after
the existing ones therefore leaves the existing sessions' packets unchanged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from ipaddress import IPv4Address
from typing import Optional

from ..capture import PROTO_TCP, PROTO_UDP, TCP_ACK, TCP_PSH, TCP_SYN
from ..mesh import TopologyEvent
from .config import ConfigError, Host, Violation, _Checker, read_json

MIN_FRAME = 60
ATTACK_KINDS = ("syn_flood", "port_scan", "distributed_scan", "exfiltration")
TOPOLOGY_ACTIONS = ("node_down", "node_up", "link_down", "link_up")
SCAN_SPORT = 40000
EXFIL_SPORT = 45000


@dataclass(frozen=True)
class Session:
    client: str
    server: str
    server_port: int
    period_s: float
    request_bytes: int
    response_bytes: int
    jitter_frac: float = 0.0
    start_s: float = 0.0
    protocol: str = "tcp"
    client_port: Optional[int] = None
    response_delay_s: float = 0.002

    def sort_key(self):
        return (self.client, self.server, self.server_port)


@dataclass(frozen=True)
class Attack:
    kind: str
    start_s: float
    stop_s: float
    params: dict = field(default_factory=dict, hash=False, compare=False)


@dataclass(frozen=True)
class ScheduledEvent:
    t_s: float
    event: TopologyEvent


@dataclass
class TrafficProfile:
    sessions: list[Session] = field(default_factory=list)
    attacks: list[Attack] = field(default_factory=list)
    events: list[ScheduledEvent] = field(default_factory=list)

    def without_attacks(self) -> "TrafficProfile":
        return TrafficProfile(list(self.sessions), [], list(self.events))


@dataclass(frozen=True)
class ProdPacket:
    """One production frame as sent by a host."""
    packet_id: int
    ts_us: int
    src_host: str
    dst_host: str
    src_ip: IPv4Address
    dst_ip: IPv4Address
    protocol: int
    src_port: int
    dst_port: int
    tcp_flags: int
    wire_len: int


def _us(seconds: float) -> int:
    return round(seconds * 1_000_000)


_SESSION_FIELDS = {"client": str, "server": str, "server_port": int, "period_s": (int, float),
                   "request_bytes": int, "response_bytes": int}
_SESSION_OPTIONAL = {"jitter_frac": (int, float), "start_s": (int, float), "protocol": str,
                     "client_port": int, "response_delay_s": (int, float)}


def load_profile(doc, hosts: Optional[dict[str, Host]] = None) -> TrafficProfile:
    """Parse a traffic profile; when ``hosts`` is given, host references are checked."""
    d = read_json(doc)
    ck = _Checker()
    if not isinstance(d, dict):
        raise ConfigError([Violation("SchemaViolation", "profile: expected a JSON object")])

    def host_ref(h, where):
        if h is not None and hosts is not None and h not in hosts:
            ck.add("DanglingReference", f"{where}: unknown host '{h}'")

    sessions = []
    for i, sd in enumerate(ck.get(d, "sessions", list, "profile", default=[]) or []):
        where = f"sessions[{i}]"
        kw = {k: ck.get(sd, k, t, where) for k, t in _SESSION_FIELDS.items()}
        for k, t in _SESSION_OPTIONAL.items():
            if isinstance(sd, dict) and k in sd:
                kw[k] = ck.get(sd, k, t, where)
        if isinstance(sd, dict):
            for k in sorted(set(sd) - set(_SESSION_FIELDS) - set(_SESSION_OPTIONAL)):
                ck.add("SchemaViolation", f"{where}: unknown field '{k}'")
        if any(v is None for v in kw.values()):
            continue
        host_ref(kw["client"], where)
        host_ref(kw["server"], where)
        s = Session(**kw)
        if s.period_s <= 0:
            ck.add("SchemaViolation", f"{where}.period_s: must be > 0")
        if not 0 <= s.jitter_frac < 0.5:
            ck.add("SchemaViolation", f"{where}.jitter_frac: must lie in [0, 0.5)")
        if s.protocol not in ("tcp", "udp"):
            ck.add("SchemaViolation", f"{where}.protocol: expected 'tcp' or 'udp'")
        if min(s.request_bytes, s.response_bytes) < MIN_FRAME:
            ck.add("SchemaViolation", f"{where}: frame sizes must be >= {MIN_FRAME}")
        sessions.append(s)

    attacks = []
    for i, ad in enumerate(ck.get(d, "attacks", list, "profile", default=[]) or []):
        where = f"attacks[{i}]"
        kind = ck.get(ad, "kind", str, where)
        start = ck.get(ad, "start_s", (int, float), where)
        stop = ck.get(ad, "stop_s", (int, float), where)
        params = ck.get(ad, "params", dict, where, default={})
        if kind is not None and kind not in ATTACK_KINDS:
            ck.add("SchemaViolation", f"{where}.kind: '{kind}' not one of {list(ATTACK_KINDS)}")
            continue
        if None in (kind, start, stop, params):
            continue
        if stop < start:
            ck.add("SchemaViolation", f"{where}: stop_s before start_s")
        for k in ("attacker", "target"):
            if k in params:
                host_ref(params[k], f"{where}.params.{k}")
        for j, leg in enumerate(params.get("legs", [])):
            for k in ("attacker", "target"):
                host_ref(leg.get(k), f"{where}.params.legs[{j}].{k}")
        attacks.append(Attack(kind, float(start), float(stop), dict(params)))

    events = []
    for i, ed in enumerate(ck.get(d, "events", list, "profile", default=[]) or []):
        where = f"events[{i}]"
        t = ck.get(ed, "t_s", (int, float), where)
        action = ck.get(ed, "action", str, where)
        target = ck.get(ed, "target", (str, list), where)
        if action is not None and action not in TOPOLOGY_ACTIONS:
            ck.add("SchemaViolation", f"{where}.action: '{action}' unknown")
            continue
        if None in (t, action, target):
            continue
        tgt = (target,) if isinstance(target, str) else tuple(target)
        events.append(ScheduledEvent(float(t), TopologyEvent(action, tgt)))

    if ck.violations:
        raise ConfigError(ck.violations)
    return TrafficProfile(sessions, attacks, events)


def check_profile_duration(profile: TrafficProfile, duration_s: float) -> None:
    bad = [Violation("SchemaViolation", f"attack '{a.kind}' window [{a.start_s}, {a.stop_s}] "
                                        f"outside run duration {duration_s}")
           for a in profile.attacks if a.start_s < 0 or a.stop_s > duration_s]
    if bad:
        raise ConfigError(bad)


def _port_list(ports) -> list[int]:
    if isinstance(ports, dict):
        return list(range(int(ports["from"]), int(ports["to"]) + 1))
    return [int(p) for p in ports]


def generate_traffic(profile: TrafficProfile, prng, duration_s: float,
                     hosts: dict[str, Host]) -> list[ProdPacket]:
    """Expand a profile into time-ordered production packets with ids assigned."""
    end = _us(duration_s)
    raw: list[tuple] = []  # (ts, creation order, fields...)

    def emit(ts, src, dst, proto, sport, dport, flags, size, src_ip=None):
        if 0 <= ts < end:
            raw.append((ts, len(raw), src, dst, src_ip or hosts[src].ip, hosts[dst].ip,
                        proto, sport, dport, flags, size))

    port_use: dict[str, int] = {}
    for s in sorted(profile.sessions, key=Session.sort_key):
        cport = s.client_port
        if cport is None:
            cport = 49152 + port_use.get(s.client, 0)
            port_use[s.client] = port_use.get(s.client, 0) + 1
        tcp = s.protocol == "tcp"
        proto = PROTO_TCP if tcp else PROTO_UDP
        period = _us(s.period_s)
        delay = _us(s.response_delay_s)
        t0 = _us(s.start_s)
        if tcp:
            emit(t0, s.client, s.server, proto, cport, s.server_port, TCP_SYN, MIN_FRAME)
            emit(t0 + delay, s.server, s.client, proto, s.server_port, cport, TCP_SYN | TCP_ACK, MIN_FRAME)
            emit(t0 + 2 * delay, s.client, s.server, proto, cport, s.server_port, TCP_ACK, MIN_FRAME)
            t0 += 3 * delay
        data_flags = TCP_PSH | TCP_ACK if tcp else 0
        k = 0
        while t0 + k * period < end:
            u = prng.next_float()
            jitter = math.floor((2 * u - 1) * s.jitter_frac * period)
            t = max(t0 + k * period + jitter, 0)
            emit(t, s.client, s.server, proto, cport, s.server_port, data_flags, s.request_bytes)
            emit(t + delay, s.server, s.client, proto, s.server_port, cport, data_flags, s.response_bytes)
            k += 1

    for a in profile.attacks:
        p = a.params
        start, stop = _us(a.start_s), min(_us(a.stop_s), end)
        if a.kind == "syn_flood":
            rate = float(p["rate_pps"])
            n = math.floor((stop - start) * rate / 1_000_000)
            for i in range(n):
                ts = start + math.floor(i * 1_000_000 / rate)
                emit(ts, p["attacker"], p["target"], PROTO_TCP, 1024 + i % 64512, int(p["port"]),
                     TCP_SYN, MIN_FRAME)
        elif a.kind == "port_scan":
            gap = _us(p.get("gap_s", 0.05))
            for i, port in enumerate(_port_list(p["ports"])):
                if start + i * gap <= stop:
                    emit(start + i * gap, p["attacker"], p["target"], PROTO_TCP, SCAN_SPORT, port,
                         TCP_SYN, MIN_FRAME)
        elif a.kind == "distributed_scan":
            gap = _us(p.get("gap_s", 0.05))
            ports = _port_list(p["ports"])
            legs = p["legs"]
            src_ip = IPv4Address(p["src_ip"]) if "src_ip" in p else None
            base, extra = divmod(len(ports), len(legs))
            pos = 0
            for j, leg in enumerate(legs):
                chunk = ports[pos:pos + base + (1 if j < extra else 0)]
                pos += len(chunk)
                for i, port in enumerate(chunk):
                    if start + i * gap <= stop:
                        emit(start + i * gap, leg["attacker"], leg["target"], PROTO_TCP, SCAN_SPORT,
                             port, TCP_SYN, MIN_FRAME, src_ip=src_ip)
        elif a.kind == "exfiltration":
            rate = float(p.get("rate_pps", 100))
            frame = int(p.get("frame_bytes", 1514))
            n = math.ceil(int(p["bytes_total"]) / frame)
            for i in range(n):
                ts = start + math.floor(i * 1_000_000 / rate)
                if ts > stop:
                    break
                emit(ts, p["attacker"], p["target"], PROTO_TCP, EXFIL_SPORT, int(p["port"]),
                     TCP_PSH | TCP_ACK, frame)

    raw.sort(key=lambda r: (r[0], r[1]))
    return [ProdPacket(i, r[0], *r[2:]) for i, r in enumerate(raw)]
