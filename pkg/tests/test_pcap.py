import io
import struct

import pytest
from hypothesis import given, settings, strategies as st

from ovpnfp.pcap import (
    TCP_ACK,
    TCP_SYN,
    CaptureError,
    PcapWriter,
    Transport,
    build_frame,
    decode,
    ipv4_checksum,
    open_capture,
)

A = bytes([10, 0, 0, 1])
B = bytes([10, 0, 0, 2])


def _write(path, frames, **kw):
    with open(path, "wb") as f:
        w = PcapWriter(f, **kw)
        for ts, fr in frames:
            w.write(ts, fr)


def test_three_tcp_payload_packets(tmp_pcap):
    frames = [(i * 1000, build_frame(Transport.TCP, A, B, 5000, 1194, b"x" * (i + 1), seq=i)) for i in range(3)]
    _write(tmp_pcap, frames)
    pkts = list(open_capture(tmp_pcap))
    assert [p.payload for p in pkts] == [b"x", b"xx", b"xxx"]
    assert all(p.transport is Transport.TCP and p.sport == 5000 and p.dport == 1194 for p in pkts)


def test_arp_frame_is_skipped_and_counted(tmp_pcap):
    arp = bytes(12) + b"\x08\x06" + bytes(28)
    frames = [(0, arp), (1, build_frame(Transport.UDP, A, B, 1, 2, b"a")), (2, build_frame(Transport.UDP, B, A, 2, 1, b"b"))]
    _write(tmp_pcap, frames)
    reader = open_capture(tmp_pcap)
    pkts = list(reader)
    assert len(pkts) == 2
    assert reader.stats.skipped == 1


@pytest.mark.parametrize("endian", ["<", ">"])
def test_nanosecond_and_microsecond_timestamps(tmp_path, endian):
    ts = 1_628_900_000_123_456_789
    frame = build_frame(Transport.UDP, A, B, 1, 2, b"z")
    _write(tmp_path / "ns.pcap", [(ts, frame)], nanosecond=True, endian=endian)
    _write(tmp_path / "us.pcap", [(ts, frame)], nanosecond=False, endian=endian)
    (ns,) = open_capture(tmp_path / "ns.pcap")
    (us,) = open_capture(tmp_path / "us.pcap")
    assert ns.ts_ns == ts
    assert us.ts_ns == ts - ts % 1000


def test_unknown_magic(tmp_pcap):
    tmp_pcap.write_bytes(b"\x0a\x0d\x0d\x0a" + bytes(40))
    with pytest.raises(CaptureError):
        open_capture(tmp_pcap)


def test_missing_file(tmp_path):
    with pytest.raises(CaptureError):
        open_capture(tmp_path / "nope.pcap")


def test_truncated_record_is_counted_not_fatal(tmp_pcap):
    frame = build_frame(Transport.UDP, A, B, 1, 2, b"abc")
    _write(tmp_pcap, [(0, frame), (1, frame)])
    data = tmp_pcap.read_bytes()
    tmp_pcap.write_bytes(data[:-5])
    reader = open_capture(tmp_pcap)
    assert len(list(reader)) == 1
    assert reader.stats.truncated == 1


def test_ipv6_and_vlan():
    v6a, v6b = bytes(15) + b"\x01", bytes(15) + b"\x02"
    frame = build_frame(Transport.TCP, v6a, v6b, 4000, 443, b"hello", seq=77, flags=TCP_ACK)
    pkt = decode(1, frame, 5)
    assert pkt.src == v6a and pkt.payload == b"hello" and pkt.seq == 77
    v4 = build_frame(Transport.UDP, A, B, 9, 10, b"q")
    tagged = v4[:12] + b"\x81\x00\x00\x05" + v4[12:]
    assert decode(1, tagged, 0).payload == b"q"


def test_ipv6_extension_header_is_skipped():
    udp = struct.pack(">HHHH", 1, 2, 9, 0) + b"e"
    hop = bytes([17, 0]) + bytes(6)  # next header UDP, 8-byte hop-by-hop
    ip6 = struct.pack(">IHBB16s16s", 6 << 28, len(hop) + len(udp), 0, 64, bytes(16), bytes(15) + b"\x01")
    frame = bytes(12) + b"\x86\xdd" + ip6 + hop + udp
    assert decode(1, frame, 0).payload == b"e"


def test_ipv4_checksum_validates():
    frame = build_frame(Transport.TCP, A, B, 1, 2, b"", flags=TCP_SYN)
    assert ipv4_checksum(frame[14:34]) == 0


@settings(max_examples=50)
@given(st.lists(st.binary(min_size=0, max_size=300), min_size=1, max_size=20))
def test_round_trip_payloads(tmp_path_factory, payloads):
    path = tmp_path_factory.mktemp("rt") / "x.pcap"
    buf = io.BytesIO()
    w = PcapWriter(buf)
    for i, p in enumerate(payloads):
        w.write(i, build_frame(Transport.UDP, A, B, 1000 + i, 53, p))
    path.write_bytes(buf.getvalue())
    assert [p.payload for p in open_capture(path)] == payloads
