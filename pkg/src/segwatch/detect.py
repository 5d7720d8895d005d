"""Collector-local anomaly detection over tumbling traffic windows.

Three detectors run per observation point:

* an EWMA z-score test on per-window volume features (``volume_anomaly``),
* a distinct-destination-port count per source (``port_scan``),
* an inventory of sources and services learned during a warm-in phase
  (``new_entity``).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from ipaddress import IPv4Address
from typing import Iterable, Iterator, Optional, Union

from .capture import PROTO_TCP, TCP_ACK, TCP_SYN, PacketRecord
from .flows import FlowRecord

ALARM_KINDS = ("volume_anomaly", "port_scan", "new_entity", "global_scan",
               "coverage_gap", "delivery_failure")
VOLUME_FEATURES = ("pkt_count", "byte_count", "syn_count")


class NonFiniteInput(ValueError):
    pass


@dataclass
class DetectorConfig:
    window_s: float = 10
    alpha: float = 0.1
    k_sigma: float = 3.0
    sigma_min: float = 1.0
    warmup_windows: int = 10
    scan_port_threshold: int = 20
    learning_windows: int = 30

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.k_sigma <= 0 or self.sigma_min <= 0 or self.window_s <= 0:
            raise ValueError("k_sigma, sigma_min and window_s must be positive")

    @property
    def window_us(self) -> int:
        return round(self.window_s * 1_000_000)


@dataclass(frozen=True)
class Alarm:
    """Detector verdict.

    Field meaning per kind:

    * volume_anomaly: subject = feature name, observed = window value,
      baseline = EWMA mean before the update, threshold = allowed absolute
      deviation ``k_sigma * max(sigma, sigma_min)``.
    * port_scan / global_scan: subject = source IP, observed = distinct
      destination ports, baseline = 0, threshold = port threshold.
    * new_entity: subject = source IP or ``src>dst:port/proto``, observed = 1.
    * coverage_gap: subject = collector id, observed = missed cycles,
      threshold = minimum run length, window_index = first missed cycle.
    * delivery_failure: subject = ``receiver#seq``, observed = attempts,
      threshold = max_retries, window_index = seq.
    """
    ts_us: int
    obs_point: str
    kind: str
    subject: str
    observed: float
    baseline: float
    threshold: float
    window_index: int

    def sort_key(self):
        return (self.ts_us, self.obs_point, self.kind, self.subject, self.window_index)


def alarm_to_dict(a: Alarm) -> dict:
    return {"ts_us": a.ts_us, "obs_point": a.obs_point, "kind": a.kind, "subject": a.subject,
            "observed": a.observed, "baseline": a.baseline, "threshold": a.threshold,
            "window_index": a.window_index}


def alarm_from_dict(d: dict) -> Alarm:
    if d["kind"] not in ALARM_KINDS:
        raise ValueError(f"unknown alarm kind {d['kind']!r}")
    return Alarm(int(d["ts_us"]), str(d["obs_point"]), d["kind"], str(d["subject"]),
                 float(d["observed"]), float(d["baseline"]), float(d["threshold"]),
                 int(d["window_index"]))


def alarms_to_jsonl(alarms: Iterable[Alarm]) -> str:
    return "".join(json.dumps(alarm_to_dict(a)) + "\n" for a in alarms)


def iter_alarms_jsonl(lines: Iterable[str]) -> Iterator[Alarm]:
    for line in lines:
        if line.strip():
            yield alarm_from_dict(json.loads(line))


# -- windowing ----------------------------------------------------------------

Entity = Union[IPv4Address, tuple]


@dataclass
class WindowFeatures:
    window_index: int
    obs_point: str
    pkt_count: int = 0
    byte_count: int = 0
    syn_count: int = 0
    per_src_dst_ports: dict[IPv4Address, set[tuple[IPv4Address, int]]] = field(default_factory=dict)
    entities_seen: set = field(default_factory=set)

    def add_packet(self, pkt: PacketRecord) -> None:
        self.pkt_count += 1
        self.byte_count += pkt.wire_len
        ip = pkt.ip
        if ip is None:
            return
        syn = pkt.is_syn
        if syn:
            self.syn_count += 1
        self.entities_seen.add(ip.src_ip)
        # only connection attempts (or connectionless traffic) count as contacts
        if ip.protocol != PROTO_TCP or syn:
            dport = pkt.l4.dst_port if pkt.l4 is not None else 0
            self._contact(ip.src_ip, ip.dst_ip, dport, ip.protocol)

    def add_flow(self, rec: FlowRecord) -> None:
        """Fold a flow in as if its packets all fell into this window.

        SYN packets are estimated as the forward packet count of a TCP flow
        whose forward flags show SYN without ACK.
        """
        self.pkt_count += rec.pkts
        self.byte_count += rec.bytes
        proto = rec.key.protocol
        src, _ = rec.initiator()
        dst, dport = rec.responder()
        if proto == PROTO_TCP and rec.tcp_flags_fwd & TCP_SYN and not rec.tcp_flags_fwd & TCP_ACK:
            self.syn_count += rec.fwd_pkts
        self.entities_seen.add(src)
        if rec.rev_pkts:
            self.entities_seen.add(dst)
        if proto != PROTO_TCP or rec.tcp_flags_fwd & TCP_SYN:
            self._contact(src, dst, dport, proto)

    def _contact(self, src, dst, dport, proto) -> None:
        self.per_src_dst_ports.setdefault(src, set()).add((dst, dport))
        self.entities_seen.add((src, dst, dport, proto))

    def feature(self, name: str) -> float:
        return float(getattr(self, name))


def windowize(records: Iterable[Union[PacketRecord, FlowRecord]],
              config: DetectorConfig | None = None) -> list[WindowFeatures]:
    """Bin packets (by timestamp) or flows (by first_ts) into tumbling windows.

    Only non-empty windows are returned, ordered by (window_index, obs_point).
    """
    config = config or DetectorConfig()
    w = config.window_us
    windows: dict[tuple[int, str], WindowFeatures] = {}
    for rec in records:
        if isinstance(rec, FlowRecord):
            idx = rec.first_ts // w
        else:
            idx = rec.ts_micros // w
        k = (idx, rec.obs_point)
        win = windows.get(k)
        if win is None:
            win = windows[k] = WindowFeatures(idx, rec.obs_point)
        if isinstance(rec, FlowRecord):
            win.add_flow(rec)
        else:
            win.add_packet(rec)
    return [windows[k] for k in sorted(windows)]


# -- EWMA -----------------------------------------------------------------------

@dataclass(frozen=True)
class EwmaState:
    mean: float = 0.0
    var: float = 0.0
    windows_seen: int = 0


def ewma_update(state: EwmaState, x: float, config: DetectorConfig | None = None, *,
                obs_point: str = "", subject: str = "", window_index: int = 0,
                ts_us: int = 0) -> tuple[EwmaState, float, Optional[Alarm]]:
    """One step of the EWMA z-score detector.

    The z-score is taken against the baseline *before* ``x`` is folded in.
    """
    config = config or DetectorConfig()
    if not math.isfinite(x):
        raise NonFiniteInput(f"non-finite sample {x!r}")
    if state.windows_seen == 0:
        return EwmaState(float(x), 0.0, 1), 0.0, None
    mu, var = state.mean, state.var
    dev = x - mu
    sigma = max(math.sqrt(var), config.sigma_min)
    z = abs(dev) / sigma
    alarm = None
    if state.windows_seen >= config.warmup_windows and z > config.k_sigma:
        alarm = Alarm(ts_us, obs_point, "volume_anomaly", subject, float(x), mu,
                      config.k_sigma * sigma, window_index)
    a = config.alpha
    # mu + a*dev equals a*x + (1-a)*mu but stays exact on a constant series
    new = EwmaState(mu + a * dev, a * dev * dev + (1 - a) * var, state.windows_seen + 1)
    return new, z, alarm


# -- scans and inventory ----------------------------------------------------------

def distinct_ports(pairs: Iterable[tuple[IPv4Address, int]]) -> int:
    return len({port for _, port in pairs})


def scan_detect(window: WindowFeatures, config: DetectorConfig | None = None) -> list[Alarm]:
    config = config or DetectorConfig()
    thr = config.scan_port_threshold
    ts = (window.window_index + 1) * config.window_us
    out = []
    for src in sorted(window.per_src_dst_ports):
        n = distinct_ports(window.per_src_dst_ports[src])
        if n > thr:
            out.append(Alarm(ts, window.obs_point, "port_scan", str(src), float(n), 0.0,
                             float(thr), window.window_index))
    return out


def entity_label(entity) -> str:
    if isinstance(entity, tuple):
        src, dst, port, proto = entity
        return f"{src}>{dst}:{port}/{proto}"
    return str(entity)


def _entity_order(entity):
    if isinstance(entity, tuple):
        return (1, entity)
    return (0, (entity,))


@dataclass
class Inventory:
    """Entities known at one observation point."""
    first_window: Optional[int] = None
    known: set = field(default_factory=set)


def new_entity_detect(state: Inventory, window: WindowFeatures,
                      config: DetectorConfig | None = None) -> tuple[Inventory, list[Alarm]]:
    config = config or DetectorConfig()
    known = set(state.known)
    first = window.window_index if state.first_window is None else state.first_window
    fresh = window.entities_seen - known
    known |= fresh
    alarms = []
    if window.window_index - first >= config.learning_windows:
        ts = (window.window_index + 1) * config.window_us
        for ent in sorted(fresh, key=_entity_order):
            alarms.append(Alarm(ts, window.obs_point, "new_entity", entity_label(ent), 1.0, 0.0,
                                0.0, window.window_index))
    return Inventory(first, known), alarms


# -- per observation point pipeline ------------------------------------------------

class LocalDetector:
    """All local detectors for one observation point, fed window by window.

    Windows skipped because they saw no traffic are replayed into the EWMA
    series as zero-valued samples, so silence is part of the time series.
    """

    def __init__(self, obs_point: str, config: DetectorConfig | None = None):
        self.obs_point = obs_point
        self.config = config or DetectorConfig()
        self.ewma = {name: EwmaState() for name in VOLUME_FEATURES}
        self.inventory = Inventory()
        self.last_index: Optional[int] = None

    def _volume(self, window: WindowFeatures) -> list[Alarm]:
        out = []
        ts = (window.window_index + 1) * self.config.window_us
        for name in VOLUME_FEATURES:
            st, _, alarm = ewma_update(self.ewma[name], window.feature(name), self.config,
                                       obs_point=self.obs_point, subject=name,
                                       window_index=window.window_index, ts_us=ts)
            self.ewma[name] = st
            if alarm is not None:
                out.append(alarm)
        return out

    def process(self, window: WindowFeatures) -> list[Alarm]:
        if self.last_index is not None and window.window_index <= self.last_index:
            raise ValueError("windows must be processed in ascending order")
        alarms: list[Alarm] = []
        if self.last_index is not None:
            for idx in range(self.last_index + 1, window.window_index):
                alarms += self._volume(WindowFeatures(idx, self.obs_point))
        self.last_index = window.window_index
        alarms += self._volume(window)
        alarms += scan_detect(window, self.config)
        self.inventory, fresh = new_entity_detect(self.inventory, window, self.config)
        alarms += fresh
        return alarms


def detect_stream(records: Iterable[Union[PacketRecord, FlowRecord]],
                  config: DetectorConfig | None = None) -> list[Alarm]:
    """Windowize a record stream and run every local detector over it."""
    config = config or DetectorConfig()
    detectors: dict[str, LocalDetector] = {}
    alarms: list[Alarm] = []
    for win in windowize(records, config):
        det = detectors.get(win.obs_point)
        if det is None:
            det = detectors[win.obs_point] = LocalDetector(win.obs_point, config)
        alarms += det.process(win)
    alarms.sort(key=Alarm.sort_key)
    return alarms


def config_from_dict(d: dict) -> DetectorConfig:
    known = DetectorConfig.__dataclass_fields__
    extra = set(d) - set(known)
    if extra:
        raise ValueError(f"unknown detector fields: {sorted(extra)}")
    return replace(DetectorConfig(), **d)
