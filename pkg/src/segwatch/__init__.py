"""Passive, segment-distributed monitoring for industrial networks.

Collectors tap switch and gateway mirror ports, compress packets into
bidirectional flows, run local time-series detectors, and ship flows and
alarms over a simulated wireless mesh to hierarchical aggregators.
"""
from .capture import PacketRecord, parse_pcap, write_pcap
from .flows import FlowRecord, FlowTable, FlowTableConfig
from .detect import Alarm, DetectorConfig
from .aggregate import FlowView

__version__ = "0.1.0"

__all__ = ["PacketRecord", "parse_pcap", "write_pcap", "FlowRecord", "FlowTable",
           "FlowTableConfig", "Alarm", "DetectorConfig", "FlowView"]
