"""Classic pcap reading and writing with Ethernet/IPv4/IPv6/TCP/UDP decoding.

Only the subset needed for flow fingerprinting is decoded: addresses, ports,
TCP sequence number and flags, and the transport payload.
"""

from __future__ import annotations

import logging
import mmap
import os
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import BinaryIO, Iterator

log = logging.getLogger(__name__)

MAGIC_USEC = 0xA1B2C3D4
MAGIC_NSEC = 0xA1B23C4D

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_IPV4 = 228
LINKTYPE_IPV6 = 229

ETH_IPV4 = 0x0800
ETH_IPV6 = 0x86DD
ETH_VLAN = (0x8100, 0x88A8)

PROTO_TCP = 6
PROTO_UDP = 17
_IPV6_EXT_HEADERS = frozenset({0, 43, 44, 60, 51})

TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_PSH = 0x08
TCP_ACK = 0x10


class Transport(str, Enum):
    TCP = "tcp"
    UDP = "udp"


class CaptureError(Exception):
    """The capture file cannot be opened or is not a classic pcap."""


@dataclass(slots=True)
class RawPacket:
    """One decoded TCP or UDP packet, in capture order.

    Addresses are packed bytes (4 or 16 long); ``ts_ns`` keeps full
    nanosecond resolution for nanosecond captures.
    """

    ts_ns: int
    transport: Transport
    src: bytes
    dst: bytes
    sport: int
    dport: int
    payload: bytes
    seq: int = 0
    flags: int = 0

    @property
    def timestamp(self) -> float:
        return self.ts_ns / 1e9


@dataclass
class CaptureStats:
    records: int = 0
    packets: int = 0
    skipped: int = 0
    truncated: int = 0


@dataclass
class PcapReader:
    """Iterate the TCP/UDP packets of a classic pcap file.

    Non-IP frames and other transports are skipped and counted in
    ``stats.skipped``; a truncated trailing record ends iteration and is
    counted in ``stats.truncated``.
    """

    path: str
    stats: CaptureStats = field(default_factory=CaptureStats)
    nanosecond: bool = False
    linktype: int = LINKTYPE_ETHERNET
    _endian: str = "<"

    def __post_init__(self) -> None:
        try:
            with open(self.path, "rb") as f:
                header = f.read(24)
        except OSError as exc:
            raise CaptureError(f"cannot read {self.path}: {exc}") from exc
        if len(header) < 24:
            raise CaptureError(f"{self.path}: too short for a pcap header")
        for endian in ("<", ">"):
            (magic,) = struct.unpack(endian + "I", header[:4])
            if magic in (MAGIC_USEC, MAGIC_NSEC):
                self._endian = endian
                self.nanosecond = magic == MAGIC_NSEC
                break
        else:
            raise CaptureError(f"{self.path}: unknown magic {header[:4].hex()}")
        self.linktype = struct.unpack(self._endian + "I", header[20:24])[0] & 0x0FFFFFFF

    def __iter__(self) -> Iterator[RawPacket]:
        size = os.path.getsize(self.path)
        if size <= 24:
            return
        with open(self.path, "rb") as f, mmap.mmap(f.fileno(), 0, access=mmap.ACCESS_READ) as mm:
            yield from self._records(mm, size)

    def _records(self, mm: mmap.mmap, size: int) -> Iterator[RawPacket]:
        rec = struct.Struct(self._endian + "IIII")
        frac = 1 if self.nanosecond else 1000
        linktype = self.linktype
        stats = self.stats
        off = 24
        while off + 16 <= size:
            sec, sub, caplen, _wirelen = rec.unpack_from(mm, off)
            off += 16
            if off + caplen > size:
                stats.truncated += 1
                return
            data = mm[off : off + caplen]
            off += caplen
            stats.records += 1
            pkt = decode(linktype, data, sec * 1_000_000_000 + sub * frac)
            if pkt is None:
                stats.skipped += 1
            else:
                stats.packets += 1
                yield pkt
        if off != size:
            stats.truncated += 1


def open_capture(path: str | os.PathLike) -> PcapReader:
    return PcapReader(os.fspath(path))


_u16 = struct.Struct(">H")
_tcp_hdr = struct.Struct(">HHIIBB")
_udp_hdr = struct.Struct(">HH")


def decode(linktype: int, data: bytes, ts_ns: int) -> RawPacket | None:
    """Decode one link-layer frame; None for anything that is not IP + TCP/UDP."""
    if linktype == LINKTYPE_ETHERNET:
        if len(data) < 14:
            return None
        off = 12
        (ethertype,) = _u16.unpack_from(data, off)
        off += 2
        while ethertype in ETH_VLAN and len(data) >= off + 4:
            (ethertype,) = _u16.unpack_from(data, off + 2)
            off += 4
    elif linktype in (LINKTYPE_RAW, LINKTYPE_IPV4, LINKTYPE_IPV6):
        if not data:
            return None
        off = 0
        ethertype = ETH_IPV4 if data[0] >> 4 == 4 else ETH_IPV6
    else:
        return None

    if ethertype == ETH_IPV4:
        if len(data) < off + 20:
            return None
        ihl = (data[off] & 0x0F) * 4
        (total,) = _u16.unpack_from(data, off + 2)
        (frag,) = _u16.unpack_from(data, off + 6)
        if frag & 0x1FFF:
            return None  # non-first fragment
        proto = data[off + 9]
        src = data[off + 12 : off + 16]
        dst = data[off + 16 : off + 20]
        end = min(len(data), off + total) if total else len(data)
        off += ihl
    elif ethertype == ETH_IPV6:
        if len(data) < off + 40:
            return None
        (plen,) = _u16.unpack_from(data, off + 4)
        proto = data[off + 6]
        src = data[off + 8 : off + 24]
        dst = data[off + 24 : off + 40]
        end = min(len(data), off + 40 + plen)
        off += 40
        while proto in _IPV6_EXT_HEADERS:
            if len(data) < off + 8:
                return None
            if proto == 44:
                if _u16.unpack_from(data, off + 2)[0] & 0xFFF8:
                    return None
                nxt, hlen = data[off], 8
            elif proto == 51:
                nxt, hlen = data[off], (data[off + 1] + 2) * 4
            else:
                nxt, hlen = data[off], (data[off + 1] + 1) * 8
            proto = nxt
            off += hlen
    else:
        return None

    if proto == PROTO_TCP:
        if end < off + 20:
            return None
        sport, dport, seq, _ack, doff, flags = _tcp_hdr.unpack_from(data, off)
        start = off + (doff >> 4) * 4
        return RawPacket(ts_ns, Transport.TCP, src, dst, sport, dport, data[start:end], seq, flags)
    if proto == PROTO_UDP:
        if end < off + 8:
            return None
        sport, dport = _udp_hdr.unpack_from(data, off)
        return RawPacket(ts_ns, Transport.UDP, src, dst, sport, dport, data[off + 8 : end])
    return None


# --- writing ---------------------------------------------------------------


def ipv4_checksum(header: bytes) -> int:
    if len(header) % 2:
        header += b"\0"
    total = sum(struct.unpack(f">{len(header) // 2}H", header))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


_MAC_CLIENT = bytes.fromhex("020000000001")
_MAC_SERVER = bytes.fromhex("020000000002")


def build_frame(
    transport: Transport,
    src: bytes,
    dst: bytes,
    sport: int,
    dport: int,
    payload: bytes = b"",
    *,
    seq: int = 0,
    ack: int = 0,
    flags: int = TCP_ACK,
) -> bytes:
    """Build an Ethernet frame carrying one TCP segment or UDP datagram.

    Transport checksums are left zero; the IPv4 header checksum is filled in.
    """
    if transport is Transport.TCP:
        l4 = struct.pack(">HHIIBBHHH", sport, dport, seq & 0xFFFFFFFF, ack & 0xFFFFFFFF, 5 << 4, flags, 65535, 0, 0)
        proto = PROTO_TCP
    else:
        l4 = struct.pack(">HHHH", sport, dport, 8 + len(payload), 0)
        proto = PROTO_UDP
    body = l4 + payload
    if len(src) == 4:
        ip = struct.pack(">BBHHHBBH4s4s", 0x45, 0, 20 + len(body), 0, 0x4000, 64, proto, 0, src, dst)
        ip = ip[:10] + struct.pack(">H", ipv4_checksum(ip)) + ip[12:]
        ethertype = ETH_IPV4
    else:
        ip = struct.pack(">IHBB16s16s", 6 << 28, len(body), proto, 64, src, dst)
        ethertype = ETH_IPV6
    return _MAC_SERVER + _MAC_CLIENT + struct.pack(">H", ethertype) + ip + body


class PcapWriter:
    """Write classic pcap records (Ethernet link type)."""

    def __init__(self, fileobj: BinaryIO, *, nanosecond: bool = False, snaplen: int = 262144,
                 linktype: int = LINKTYPE_ETHERNET, endian: str = "<") -> None:
        self._f = fileobj
        self._endian = endian
        self.nanosecond = nanosecond
        magic = MAGIC_NSEC if nanosecond else MAGIC_USEC
        self._rec = struct.Struct(endian + "IIII")
        self._f.write(struct.pack(endian + "IHHiIII", magic, 2, 4, 0, 0, snaplen, linktype))

    def write(self, ts_ns: int, frame: bytes) -> None:
        sec, rem = divmod(ts_ns, 1_000_000_000)
        sub = rem if self.nanosecond else rem // 1000
        self._f.write(self._rec.pack(sec, sub, len(frame), len(frame)))
        self._f.write(frame)
