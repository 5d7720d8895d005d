"""Scenario topology configuration: loading and exhaustive validation.

``load_config`` never stops at the first problem; it gathers every
violation and raises one ``ConfigError`` listing all of them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from importlib import resources
from ipaddress import AddressValueError, IPv4Address
from pathlib import Path
from typing import Any, NamedTuple

from ..aggregate import AggregatorNode, CyclicAggregatorTree, check_tree
from ..detect import DetectorConfig
from ..flows import FlowTableConfig
from ..mesh import ROLES, MeshTopology, ReliabilityConfig


class Violation(NamedTuple):
    kind: str  # SchemaViolation | DanglingReference | DuplicateIp | DuplicateId | CyclicAggregatorTree
    message: str

    def __str__(self) -> str:
        return f"{self.kind}: {self.message}"


class ConfigError(ValueError):
    def __init__(self, violations: list[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}


@dataclass(frozen=True)
class Host:
    id: str
    ip: IPv4Address
    segment: str


@dataclass
class Segment:
    id: str
    switch: str
    collector: str
    hosts: list[Host]


@dataclass
class Gateway:
    id: str
    connects: tuple[str, str]  # switch ids
    collector: str


@dataclass
class ProductionLinks:
    host_switch_us: int = 50
    switch_gateway_us: int = 100


@dataclass
class TopologyConfig:
    name: str
    seed: int
    segments: list[Segment]
    gateways: list[Gateway]
    links: ProductionLinks
    mesh: MeshTopology
    aggregators: list[AggregatorNode]
    flow: FlowTableConfig = field(default_factory=FlowTableConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    reliability: ReliabilityConfig = field(default_factory=ReliabilityConfig)

    @property
    def hosts(self) -> dict[str, Host]:
        return {h.id: h for s in self.segments for h in s.hosts}

    @property
    def collectors(self) -> list[str]:
        """Segment collectors in config order, then gateway collectors."""
        return [s.collector for s in self.segments] + [g.collector for g in self.gateways]

    def collector_parent(self) -> dict[str, str]:
        out = {}
        for agg in self.aggregators:
            for child in agg.children:
                out[child] = agg.id
        return out

    @property
    def root_aggregator(self) -> str:
        return check_tree(self.aggregators)

    def segment_of_collector(self) -> dict[str, str]:
        out = {s.collector: s.id for s in self.segments}
        out.update({g.collector: g.id for g in self.gateways})
        return out


def read_json(doc) -> Any:
    """Accept a parsed document, a JSON string, or a path to a JSON file."""
    if isinstance(doc, (dict, list)):
        return doc
    if isinstance(doc, Path) or (isinstance(doc, str) and not doc.lstrip().startswith(("{", "["))):
        return json.loads(Path(doc).read_text())
    return json.loads(doc)


def bundled(name: str) -> dict:
    """Load one of the bundled JSON documents (e.g. ``fig2.json``)."""
    return json.loads(resources.files("segwatch.data").joinpath(name).read_text())


class _Checker:
    def __init__(self):
        self.violations: list[Violation] = []

    def add(self, kind: str, msg: str) -> None:
        self.violations.append(Violation(kind, msg))

    def get(self, d: Any, key: str, typ, where: str, default=..., ):
        if not isinstance(d, dict):
            self.add("SchemaViolation", f"{where}: expected an object")
            return None
        if key not in d:
            if default is ...:
                self.add("SchemaViolation", f"{where}: missing field '{key}'")
                return None
            return default
        val = d[key]
        ok = isinstance(val, typ) and not (typ in (int, (int, float)) and isinstance(val, bool))
        if not ok:
            self.add("SchemaViolation", f"{where}.{key}: expected {_tname(typ)}, got {type(val).__name__}")
            return None
        return val

    def sub_config(self, cls, d: Any, where: str):
        if d is None:
            return cls()
        if not isinstance(d, dict):
            self.add("SchemaViolation", f"{where}: expected an object")
            return cls()
        names = {f.name for f in fields(cls)}
        for k in sorted(set(d) - names):
            self.add("SchemaViolation", f"{where}: unknown field '{k}'")
        try:
            return cls(**{k: v for k, v in d.items() if k in names})
        except (TypeError, ValueError) as e:
            self.add("SchemaViolation", f"{where}: {e}")
            return cls()


def _tname(typ) -> str:
    if isinstance(typ, tuple):
        return "number"
    return {str: "string", int: "integer", list: "array", dict: "object", float: "number"}.get(typ, typ.__name__)


NUM = (int, float)


def load_config(doc) -> TopologyConfig:
    """Parse and validate a topology document; raise ConfigError listing every problem."""
    d = read_json(doc)
    ck = _Checker()
    if not isinstance(d, dict):
        raise ConfigError([Violation("SchemaViolation", "config: expected a JSON object")])

    name = ck.get(d, "name", str, "config", default="scenario")
    seed = ck.get(d, "seed", int, "config", default=0)

    ids: dict[str, str] = {}  # element id -> what it is

    def claim(i, what: str, where: str) -> None:
        if i is None:
            return
        if i in ids:
            ck.add("DuplicateId", f"{where}: id '{i}' already used by a {ids[i]}")
        else:
            ids[i] = what

    segments: list[Segment] = []
    ips: dict[IPv4Address, str] = {}
    for si, sd in enumerate(ck.get(d, "segments", list, "config") or []):
        where = f"segments[{si}]"
        sid = ck.get(sd, "id", str, where)
        sw = ck.get(sd, "switch", str, where)
        coll = ck.get(sd, "collector", str, where)
        claim(sid, "segment", where)
        claim(sw, "switch", where)
        claim(coll, "collector", where)
        hosts = []
        for hi, hd in enumerate(ck.get(sd, "hosts", list, where) or []):
            hw = f"{where}.hosts[{hi}]"
            hid = ck.get(hd, "id", str, hw)
            ipstr = ck.get(hd, "ip", str, hw)
            claim(hid, "host", hw)
            ip = None
            if ipstr is not None:
                try:
                    ip = IPv4Address(ipstr)
                except AddressValueError:
                    ck.add("SchemaViolation", f"{hw}.ip: '{ipstr}' is not an IPv4 address")
            if ip is not None:
                if ip in ips:
                    ck.add("DuplicateIp", f"{hw}: {ip} already assigned to host '{ips[ip]}'")
                else:
                    ips[ip] = hid
            if hid is not None and ip is not None and sid is not None:
                hosts.append(Host(hid, ip, sid))
        if sid is not None and sw is not None and coll is not None:
            segments.append(Segment(sid, sw, coll, hosts))

    switches = {s.switch for s in segments}
    gateways: list[Gateway] = []
    for gi, gd in enumerate(ck.get(d, "gateways", list, "config", default=[]) or []):
        where = f"gateways[{gi}]"
        gid = ck.get(gd, "id", str, where)
        conn = ck.get(gd, "connects", list, where)
        coll = ck.get(gd, "collector", str, where)
        claim(gid, "gateway", where)
        claim(coll, "collector", where)
        if conn is not None:
            if len(conn) != 2 or not all(isinstance(c, str) for c in conn):
                ck.add("SchemaViolation", f"{where}.connects: expected two switch ids")
                conn = None
            else:
                for c in conn:
                    if c not in switches:
                        ck.add("DanglingReference", f"{where}.connects: unknown switch id '{c}'")
        if gid is not None and conn is not None and coll is not None:
            gateways.append(Gateway(gid, (conn[0], conn[1]), coll))

    ld = ck.get(d, "production_links", dict, "config", default={})
    links = ck.sub_config(ProductionLinks, ld, "production_links")
    for f_ in ("host_switch_us", "switch_gateway_us"):
        v = getattr(links, f_)
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            ck.add("SchemaViolation", f"production_links.{f_}: expected integer >= 1")
            links = ProductionLinks()

    collectors = [s.collector for s in segments] + [g.collector for g in gateways]

    mesh = MeshTopology()
    md = ck.get(d, "mesh", dict, "config")
    if md is not None:
        for ni, nd in enumerate(ck.get(md, "nodes", list, "mesh") or []):
            where = f"mesh.nodes[{ni}]"
            nid = ck.get(nd, "id", str, where)
            role = ck.get(nd, "role", str, where)
            if role is not None and role not in ROLES:
                ck.add("SchemaViolation", f"{where}.role: '{role}' not one of {list(ROLES)}")
                role = None
            if nid is not None and role is not None:
                if nid in mesh.nodes:
                    ck.add("DuplicateId", f"{where}: mesh node '{nid}' listed twice")
                mesh.add_node(nid, role)
        for li, lk in enumerate(ck.get(md, "links", list, "mesh") or []):
            where = f"mesh.links[{li}]"
            a = ck.get(lk, "a", str, where)
            b = ck.get(lk, "b", str, where)
            lat = ck.get(lk, "latency_us", int, where)
            loss = ck.get(lk, "loss_prob", NUM, where, default=0.0)
            bad = False
            for n in (a, b):
                if n is not None and n not in mesh.nodes:
                    ck.add("DanglingReference", f"{where}: unknown mesh node '{n}'")
                    bad = True
            if a is not None and a == b:
                ck.add("SchemaViolation", f"{where}: self-link on '{a}'")
                bad = True
            if loss is not None and not 0 <= loss < 1:
                ck.add("SchemaViolation", f"{where}.loss_prob: {loss} outside [0, 1)")
                bad = True
            if lat is not None and lat < 0:
                ck.add("SchemaViolation", f"{where}.latency_us: negative")
                bad = True
            if not bad and None not in (a, b, lat, loss):
                mesh.add_link(a, b, lat, float(loss))

    aggs: list[AggregatorNode] = []
    for ai, ad in enumerate(ck.get(d, "aggregators", list, "config") or []):
        where = f"aggregators[{ai}]"
        aid = ck.get(ad, "id", str, where)
        parent = ck.get(ad, "parent", (str, type(None)), where, default=None)
        children = ck.get(ad, "children", list, where, default=[])
        claim(aid, "aggregator", where)
        if aid is not None and children is not None:
            aggs.append(AggregatorNode(aid, set(children), parent))
    agg_ids = {a.id for a in aggs}
    parents: dict[str, str] = {}
    for a in aggs:
        for c in sorted(a.children):
            if c not in agg_ids and c not in collectors:
                ck.add("DanglingReference", f"aggregator '{a.id}': unknown child '{c}'")
            elif c in parents:
                ck.add("CyclicAggregatorTree", f"'{c}' has two parents: '{parents[c]}' and '{a.id}'")
            else:
                parents[c] = a.id
        if a.parent is not None and a.parent not in agg_ids:
            ck.add("DanglingReference", f"aggregator '{a.id}': unknown parent '{a.parent}'")
    for c in collectors:
        if c not in parents:
            ck.add("DanglingReference", f"collector '{c}' is not attached to any aggregator")
    if aggs and not any(v.kind == "DanglingReference" and "aggregator" in v.message
                        for v in ck.violations):
        try:
            check_tree(aggs)
        except CyclicAggregatorTree as e:
            ck.add("CyclicAggregatorTree", str(e))
    elif not aggs and isinstance(d.get("aggregators"), list):
        ck.add("SchemaViolation", "config: at least one aggregator is required")

    if md is not None:
        for n in collectors + sorted(agg_ids):
            if n not in mesh.nodes:
                ck.add("DanglingReference", f"mesh: no mesh node for '{n}'")

    flow = ck.sub_config(FlowTableConfig, d.get("flow"), "flow")
    det = ck.sub_config(DetectorConfig, d.get("detector"), "detector")
    rel = ck.sub_config(ReliabilityConfig, d.get("reliability"), "reliability")

    if ck.violations:
        raise ConfigError(ck.violations)
    return TopologyConfig(name, seed, segments, gateways, links, mesh, aggs, flow, det, rel)
