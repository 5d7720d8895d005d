"""Classic pcap reading/writing and Ethernet/IPv4/TCP/UDP header decoding.

Only the libpcap "classic" container with microsecond timestamps and
Ethernet link type is accepted. Frames that are damaged above layer 2 are
kept as degraded records instead of aborting the whole file.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from ipaddress import IPv4Address
from typing import BinaryIO, Iterable, Optional, Union

PCAP_MAGIC = 0xA1B2C3D4
LINKTYPE_ETHERNET = 1
GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16
ETH_HEADER_LEN = 14
DEFAULT_SNAPLEN = 65535

ETHERTYPE_IPV4 = 0x0800
PROTO_ICMP = 1
PROTO_TCP = 6
PROTO_UDP = 17

TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_PSH = 0x08
TCP_ACK = 0x10

_TCP_MIN_HEADER = 20
_UDP_HEADER = 8


class CaptureError(ValueError):
    """Base class for fatal trace decoding errors."""


class BadMagic(CaptureError):
    pass


class UnsupportedLinkType(CaptureError):
    pass


class TruncatedHeader(CaptureError):
    pass


class RecordOverrun(CaptureError):
    pass


class FrameTooShort(CaptureError):
    pass


@dataclass(frozen=True)
class IPv4Info:
    src_ip: IPv4Address
    dst_ip: IPv4Address
    protocol: int
    total_len: int


@dataclass(frozen=True)
class L4Info:
    src_port: int
    dst_port: int
    tcp_flags: int = 0


@dataclass(frozen=True)
class PacketRecord:
    ts_micros: int
    obs_point: str
    src_mac: bytes
    dst_mac: bytes
    ethertype: int
    ip: Optional[IPv4Info]
    l4: Optional[L4Info]
    wire_len: int
    truncated: bool = False

    @property
    def is_tcp(self) -> bool:
        return self.ip is not None and self.ip.protocol == PROTO_TCP

    @property
    def is_syn(self) -> bool:
        """SYN set with ACK clear, i.e. a connection attempt."""
        if self.l4 is None or not self.is_tcp:
            return False
        return bool(self.l4.tcp_flags & TCP_SYN) and not self.l4.tcp_flags & TCP_ACK


@dataclass
class CaptureStats:
    frames_total: int = 0
    frames_ip: int = 0
    frames_non_ip: int = 0
    frames_truncated: int = 0
    bytes_total: int = 0

    def count(self, rec: PacketRecord) -> None:
        self.frames_total += 1
        if rec.ip is not None:
            self.frames_ip += 1
        else:
            self.frames_non_ip += 1
        if rec.truncated:
            self.frames_truncated += 1
        self.bytes_total += rec.wire_len


def parse_frame(frame: bytes, ts_micros: int, obs_point: str,
                snaplen: int = DEFAULT_SNAPLEN,
                wire_len: Optional[int] = None) -> PacketRecord:
    """Decode one Ethernet II frame.

    Decoding is limited to ``min(len(frame), snaplen)`` bytes. When a header
    needed for the next layer is cut off (or the IPv4 header is malformed)
    the record keeps the layers decoded so far and ``truncated`` is set.
    """
    if wire_len is None:
        wire_len = len(frame)
    avail = min(len(frame), snaplen)
    if avail < ETH_HEADER_LEN:
        raise FrameTooShort(f"frame has {avail} bytes, need {ETH_HEADER_LEN}")
    dst_mac = bytes(frame[0:6])
    src_mac = bytes(frame[6:12])
    (ethertype,) = struct.unpack_from("!H", frame, 12)

    def l2_only(truncated: bool) -> PacketRecord:
        return PacketRecord(ts_micros, obs_point, src_mac, dst_mac, ethertype,
                            None, None, wire_len, truncated)

    if ethertype != ETHERTYPE_IPV4:
        # VLAN-tagged and IPv6 frames land here too
        return l2_only(False)

    off = ETH_HEADER_LEN
    if avail - off < 20:
        return l2_only(True)
    ver_ihl = frame[off]
    ihl = (ver_ihl & 0x0F) * 4
    if ver_ihl >> 4 != 4 or ihl < 20 or avail - off < ihl:
        return l2_only(True)
    total_len, frag = struct.unpack_from("!H2xH", frame, off + 2)
    protocol = frame[off + 9]
    ip = IPv4Info(IPv4Address(bytes(frame[off + 12:off + 16])),
                  IPv4Address(bytes(frame[off + 16:off + 20])),
                  protocol, total_len)

    off += ihl
    if protocol not in (PROTO_TCP, PROTO_UDP) or frag & 0x1FFF:
        # non-first fragments carry no transport header
        return PacketRecord(ts_micros, obs_point, src_mac, dst_mac, ethertype,
                            ip, None, wire_len, False)
    need = _TCP_MIN_HEADER if protocol == PROTO_TCP else _UDP_HEADER
    if avail - off < need:
        return PacketRecord(ts_micros, obs_point, src_mac, dst_mac, ethertype,
                            ip, None, wire_len, True)
    sport, dport = struct.unpack_from("!HH", frame, off)
    flags = frame[off + 13] if protocol == PROTO_TCP else 0
    return PacketRecord(ts_micros, obs_point, src_mac, dst_mac, ethertype,
                        ip, L4Info(sport, dport, flags), wire_len, False)


def _read_all(stream: Union[bytes, bytearray, memoryview, BinaryIO]) -> bytes:
    if isinstance(stream, (bytes, bytearray, memoryview)):
        return bytes(stream)
    return stream.read()


def parse_pcap(stream, obs_point: str = "pcap") -> tuple[list[PacketRecord], CaptureStats]:
    """Parse a whole classic pcap trace (bytes or binary file object)."""
    data = _read_all(stream)
    if len(data) < 4:
        raise TruncatedHeader("missing pcap global header")
    magic_le = struct.unpack_from("<I", data)[0]
    if magic_le == PCAP_MAGIC:
        bo = "<"
    elif struct.unpack_from(">I", data)[0] == PCAP_MAGIC:
        bo = ">"
    else:
        raise BadMagic(f"bad pcap magic 0x{magic_le:08X}")
    if len(data) < GLOBAL_HEADER_LEN:
        raise TruncatedHeader("pcap global header shorter than 24 bytes")
    snaplen, network = struct.unpack_from(bo + "II", data, 16)
    if network != LINKTYPE_ETHERNET:
        raise UnsupportedLinkType(f"link type {network} is not Ethernet")
    if snaplen == 0:
        snaplen = DEFAULT_SNAPLEN

    records: list[PacketRecord] = []
    stats = CaptureStats()
    rec_hdr = struct.Struct(bo + "IIII")
    off = GLOBAL_HEADER_LEN
    end = len(data)
    while off < end:
        if end - off < RECORD_HEADER_LEN:
            raise TruncatedHeader(f"record header at offset {off} is cut short")
        ts_sec, ts_usec, incl_len, orig_len = rec_hdr.unpack_from(data, off)
        off += RECORD_HEADER_LEN
        if incl_len > end - off:
            raise RecordOverrun(f"record at offset {off - RECORD_HEADER_LEN} declares "
                                f"{incl_len} bytes, {end - off} remain")
        frame = data[off:off + incl_len]
        off += incl_len
        ts = ts_sec * 1_000_000 + ts_usec
        try:
            rec = parse_frame(frame, ts, obs_point, snaplen, max(orig_len, incl_len))
        except FrameTooShort:
            padded = frame.ljust(ETH_HEADER_LEN, b"\0")
            rec = PacketRecord(ts, obs_point, padded[6:12], padded[0:6], 0,
                               None, None, max(orig_len, incl_len), True)
        stats.count(rec)
        records.append(rec)
    return records, stats


def _ip_checksum(header: bytes) -> int:
    total = sum(struct.unpack(f"!{len(header) // 2}H", header))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def encode_frame(rec: PacketRecord) -> bytes:
    """Synthesize frame bytes (zero payload) carrying the record's header fields."""
    out = bytearray(rec.dst_mac + rec.src_mac + struct.pack("!H", rec.ethertype))
    if rec.ip is not None:
        ip = rec.ip
        hdr = bytearray(struct.pack("!BBHHHBBH4s4s", 0x45, 0, ip.total_len, 0, 0, 64,
                                    ip.protocol, 0, ip.src_ip.packed, ip.dst_ip.packed))
        struct.pack_into("!H", hdr, 10, _ip_checksum(bytes(hdr)))
        out += hdr
        if rec.l4 is not None:
            l4 = rec.l4
            if ip.protocol == PROTO_TCP:
                out += struct.pack("!HHIIBBHHH", l4.src_port, l4.dst_port, 0, 0,
                                   5 << 4, l4.tcp_flags, 65535, 0, 0)
            else:
                udp_len = max(ip.total_len - 20, _UDP_HEADER) & 0xFFFF
                out += struct.pack("!HHHH", l4.src_port, l4.dst_port, udp_len, 0)
    if len(out) < rec.wire_len:
        out += bytes(rec.wire_len - len(out))
    return bytes(out)


def write_pcap(records: Iterable[PacketRecord], snaplen: int = DEFAULT_SNAPLEN,
               byteorder: str = "<") -> bytes:
    """Serialize records as a classic pcap (little-endian unless ``byteorder='>'``)."""
    parts = [struct.pack(byteorder + "IHHiIII", PCAP_MAGIC, 2, 4, 0, 0, snaplen,
                         LINKTYPE_ETHERNET)]
    rec_hdr = struct.Struct(byteorder + "IIII")
    for rec in records:
        frame = encode_frame(rec)
        incl = frame[:snaplen]
        sec, usec = divmod(rec.ts_micros, 1_000_000)
        parts.append(rec_hdr.pack(sec, usec, len(incl), len(frame)))
        parts.append(incl)
    return b"".join(parts)


def mac_for_ip(ip: IPv4Address) -> bytes:
    """Locally administered MAC derived from an IPv4 address."""
    return b"\x02\x00" + ip.packed
