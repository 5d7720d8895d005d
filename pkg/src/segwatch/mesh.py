"""Wireless mesh side-channel at link abstraction.

Routing is an idealized link-state stand-in: every topology change
recomputes minimum-hop routes instantly, ties broken by the lowest
next-hop id. Reliability is stop-and-wait per envelope with acks,
retransmission on timeout and duplicate suppression at the receiver.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .events import EventQueue

ROLES = ("collector", "aggregator", "relay")
ENVELOPE_KINDS = ("flow_batch", "alarm_msg", "ack")


class NoRoute(Exception):
    pass


class UnknownElement(KeyError):
    pass


@dataclass
class MeshLink:
    a: str
    b: str
    latency_us: int
    loss_prob: float = 0.0
    up: bool = True

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError(f"self-link on {self.a}")
        if not 0.0 <= self.loss_prob < 1.0:
            raise ValueError(f"loss_prob {self.loss_prob} outside [0, 1)")
        if self.latency_us < 0:
            raise ValueError("negative link latency")


def link_id(a: str, b: str) -> frozenset:
    return frozenset((a, b))


@dataclass
class MeshTopology:
    nodes: dict[str, str] = field(default_factory=dict)  # id -> role
    links: dict[frozenset, MeshLink] = field(default_factory=dict)
    node_up: dict[str, bool] = field(default_factory=dict)

    def add_node(self, node_id: str, role: str) -> None:
        if role not in ROLES:
            raise ValueError(f"unknown mesh role {role!r}")
        self.nodes[node_id] = role
        self.node_up[node_id] = True

    def add_link(self, a: str, b: str, latency_us: int, loss_prob: float = 0.0) -> None:
        for n in (a, b):
            if n not in self.nodes:
                raise UnknownElement(n)
        self.links[link_id(a, b)] = MeshLink(a, b, latency_us, loss_prob)

    def link(self, a: str, b: str) -> MeshLink:
        try:
            return self.links[link_id(a, b)]
        except KeyError:
            raise UnknownElement(f"{a}-{b}") from None

    def neighbors(self, node: str) -> list[str]:
        """Up neighbours of an up node over up links, sorted by id."""
        if not self.node_up.get(node, False):
            return []
        out = []
        for lk in self.links.values():
            if not lk.up:
                continue
            if lk.a == node:
                other = lk.b
            elif lk.b == node:
                other = lk.a
            else:
                continue
            if self.node_up[other]:
                out.append(other)
        return sorted(out)

    def copy(self) -> "MeshTopology":
        return MeshTopology(dict(self.nodes),
                            {k: MeshLink(v.a, v.b, v.latency_us, v.loss_prob, v.up)
                             for k, v in self.links.items()},
                            dict(self.node_up))


Routes = dict[tuple[str, str], str]


def compute_routes(topology: MeshTopology) -> Routes:
    """Next hop for every reachable (src, dst) pair, src != dst."""
    adj = {n: topology.neighbors(n) for n in sorted(topology.nodes)}
    routes: Routes = {}
    for dst in adj:
        if not topology.node_up[dst]:
            continue
        dist = {dst: 0}
        q = deque([dst])
        while q:
            u = q.popleft()
            for v in adj[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    q.append(v)
        for src, d in dist.items():
            if src == dst:
                continue
            # adj lists are sorted, so the first closer neighbour is the lowest id
            routes[src, dst] = next(v for v in adj[src] if dist.get(v) == d - 1)
    return routes


def route_path(routes: Routes, src: str, dst: str) -> list[str]:
    if src == dst:
        return [src]
    path = [src]
    node = src
    while node != dst:
        nxt = routes.get((node, dst))
        if nxt is None:
            raise NoRoute(f"no route {src} -> {dst}")
        path.append(nxt)
        node = nxt
    return path


@dataclass(frozen=True)
class MeshEnvelope:
    sender: str
    receiver: str
    seq: int
    kind: str
    payload: bytes
    send_ts_us: int


@dataclass(frozen=True)
class MeshEvent:
    ts_us: int
    kind: str  # "deliver" or "drop"
    node: str  # where the envelope ends up
    path: tuple[str, ...]


def mesh_send(envelope: MeshEnvelope, topology: MeshTopology, routes: Routes, rng,
              now_us: Optional[int] = None) -> list[MeshEvent]:
    """Walk the current route hop by hop; one loss draw per hop, in hop order."""
    now = envelope.send_ts_us if now_us is None else now_us
    path = tuple(route_path(routes, envelope.sender, envelope.receiver))
    ts = now
    for a, b in zip(path, path[1:]):
        lk = topology.link(a, b)
        ts += lk.latency_us
        if rng.next_float() < lk.loss_prob:
            return [MeshEvent(ts, "drop", b, path)]
    return [MeshEvent(ts, "deliver", path[-1], path)]


@dataclass(frozen=True)
class TopologyEvent:
    action: str  # node_down | node_up | link_down | link_up
    target: tuple[str, ...]


def apply_topology_event(event: TopologyEvent, topology: MeshTopology) -> tuple[MeshTopology, Routes]:
    """Toggle the element's up-state and recompute routes (topology copied)."""
    topo = topology.copy()
    up = event.action.endswith("_up")
    if event.action in ("node_down", "node_up"):
        (node,) = event.target
        if node not in topo.nodes:
            raise UnknownElement(node)
        topo.node_up[node] = up
    elif event.action in ("link_down", "link_up"):
        a, b = event.target
        topo.link(a, b).up = up
    else:
        raise ValueError(f"unknown topology action {event.action!r}")
    return topo, compute_routes(topo)


@dataclass
class ReliabilityConfig:
    rto_us: int = 500_000
    max_retries: int = 5
    export_interval_s: float = 30

    def __post_init__(self):
        if self.rto_us <= 0:
            raise ValueError("rto_us must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.export_interval_s <= 0:
            raise ValueError("export_interval_s must be positive")


@dataclass
class _Pending:
    envelope: MeshEnvelope
    attempts: int = 0


class MeshChannel:
    """Acked, retransmitting envelope transport driven by an EventQueue.

    ``on_deliver(envelope)`` fires once per (sender, seq) at the receiver.
    ``on_failure(envelope, attempts)`` fires at the sender when retries run
    out. Every transmission, drop, delivery, ack, retry and failure is
    appended to ``log``.
    """

    def __init__(self, topology: MeshTopology, config: ReliabilityConfig, rng,
                 queue: EventQueue,
                 on_deliver: Callable[[MeshEnvelope], None] = lambda env: None,
                 on_failure: Callable[[MeshEnvelope, int], None] = lambda env, n: None):
        self.topology = topology
        self.routes = compute_routes(topology)
        self.config = config
        self.rng = rng
        self.queue = queue
        self.on_deliver = on_deliver
        self.on_failure = on_failure
        self.log: list[dict] = []
        self.transmissions = 0
        self._next_seq: dict[tuple[str, str], int] = {}
        self._pending: dict[tuple[str, str, int], _Pending] = {}
        self._seen: set[tuple[str, str, int]] = set()

    def _log(self, ts: int, env: MeshEnvelope, event: str, path=None) -> None:
        entry = {"ts_us": ts, "sender": env.sender, "receiver": env.receiver,
                 "seq": env.seq, "kind": env.kind, "event": event}
        if path is not None:
            entry["path"] = list(path)
        self.log.append(entry)

    def pending(self) -> int:
        return len(self._pending)

    def send(self, sender: str, receiver: str, kind: str, payload: bytes) -> MeshEnvelope:
        if kind not in ("flow_batch", "alarm_msg"):
            raise ValueError(f"cannot reliably send kind {kind!r}")
        seq = self._next_seq.get((sender, receiver), 0)
        self._next_seq[sender, receiver] = seq + 1
        env = MeshEnvelope(sender, receiver, seq, kind, payload, self.queue.now)
        self._pending[sender, receiver, seq] = _Pending(env)
        self._attempt(sender, receiver, seq)
        return env

    def _attempt(self, sender: str, receiver: str, seq: int) -> None:
        p = self._pending[sender, receiver, seq]
        p.attempts += 1
        self._transmit(p.envelope)
        self.queue.schedule(self.queue.now + self.config.rto_us, self._timeout,
                            sender, receiver, seq, domain="mesh", origin=sender)

    def _transmit(self, env: MeshEnvelope) -> None:
        now = self.queue.now
        self.transmissions += 1
        try:
            (ev,) = mesh_send(env, self.topology, self.routes, self.rng, now)
        except NoRoute:
            self._log(now, env, "tx", path=[env.sender])
            self._log(now, env, "drop")
            return
        self._log(now, env, "tx", path=ev.path)
        if ev.kind == "drop":
            self.queue.schedule(ev.ts_us, self._log, ev.ts_us, env, "drop",
                                domain="mesh", origin=env.sender)
        else:
            self.queue.schedule(ev.ts_us, self._arrive, env, domain="mesh", origin=env.sender)

    def _arrive(self, env: MeshEnvelope) -> None:
        now = self.queue.now
        if env.kind == "ack":
            self._log(now, env, "ack")
            # ack travels receiver -> sender, so the data sender is env.receiver
            self._pending.pop((env.receiver, env.sender, env.seq), None)
            return
        self._log(now, env, "deliver")
        ident = (env.sender, env.receiver, env.seq)
        if ident not in self._seen:
            self._seen.add(ident)
            self.on_deliver(env)
        self._transmit(MeshEnvelope(env.receiver, env.sender, env.seq, "ack", b"", now))

    def _timeout(self, sender: str, receiver: str, seq: int) -> None:
        p = self._pending.get((sender, receiver, seq))
        if p is None:
            return
        if p.attempts <= self.config.max_retries:
            self._log(self.queue.now, p.envelope, "retry")
            self._attempt(sender, receiver, seq)
        else:
            del self._pending[sender, receiver, seq]
            self._log(self.queue.now, p.envelope, "fail")
            self.on_failure(p.envelope, p.attempts)

    def apply(self, event: TopologyEvent) -> None:
        self.topology, self.routes = apply_topology_event(event, self.topology)


def reliable_deliver(channel: MeshChannel, sender: str, receiver: str, kind: str,
                     payload: bytes) -> MeshEnvelope:
    return channel.send(sender, receiver, kind, payload)


def reroutes(log: list[dict]) -> int:
    """Count tx entries whose path differs from the previous tx for the same pair."""
    last: dict[tuple[str, str], tuple] = {}
    n = 0
    for e in log:
        if e["event"] != "tx" or "path" not in e or len(e["path"]) < 2:
            continue
        pair = (e["sender"], e["receiver"])
        path = tuple(e["path"])
        if pair in last and last[pair] != path:
            n += 1
        last[pair] = path
    return n
