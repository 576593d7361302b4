import ipaddress
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from ovpnfp.flows import (
    Direction,
    FlowTable,
    Overflow,
    Status,
    StreamFramer,
    apply_loss,
    assign_flow,
    frame_tcp,
    frame_udp,
    sample_flows,
    sample_pair,
    split_stream,
    FlowKey,
)
from ovpnfp.pcap import TCP_ACK, TCP_FIN, TCP_RST, TCP_SYN, RawPacket, Transport
from ovpnfp.protocol import tcp_frame

C, S = Direction.C2S, Direction.S2C
A = bytes([10, 0, 0, 1])
B = bytes([10, 0, 0, 2])


def tcp(src, dst, sport, dport, payload=b"", seq=0, flags=TCP_ACK, ts=0):
    return RawPacket(ts, Transport.TCP, src, dst, sport, dport, payload, seq, flags)


def test_single_unit():
    f = StreamFramer()
    (fr,) = f.feed(C, 100, b"\x00\x0e\x38" + bytes(13), 0)
    assert (fr.payload_len, fr.opcode_byte) == (14, 0x38)


def test_incomplete_unit_stays_pending():
    f = StreamFramer()
    # Prime the direction with one whole unit so it is in stream mode.
    f.feed(C, 0, tcp_frame(b"\x38" + bytes(13)), 0)
    assert f.feed(C, 16, b"\x00\x10" + bytes(10), 0) == []
    (fr,) = f.feed(C, 28, bytes(6), 0)
    assert fr.payload_len == 16


def test_two_units_in_one_segment():
    seg = tcp_frame(b"\x38" + bytes(13)) + tcp_frame(b"\x20" + bytes(99))
    frames = StreamFramer().feed(C, 0, seg, 0)
    assert [(x.payload_len, x.opcode_byte) for x in frames] == [(14, 0x38), (100, 0x20)]


def test_zero_length_falls_back_to_segments():
    f = StreamFramer()
    f.feed(C, 0, tcp_frame(b"\x38" + bytes(13)), 0)
    (fr,) = f.feed(C, 16, b"\x00\x00\x17\x03\x03", 0)
    assert f.mode == "segment"
    (fr2,) = f.feed(C, 21, b"\xab\xcd\xef\x01", 0)
    assert (fr2.payload_len, fr2.opcode_byte) == (2, 0xEF)


def test_misaligned_first_segment_uses_segment_framing():
    f = StreamFramer()
    (fr,) = f.feed(C, 0, b"\x16\x03\x01\x02\x00" + bytes(512), 0)
    assert f.mode == "segment"
    assert fr.opcode_byte == 0x01 and fr.payload_len == 515


def test_forced_segment_framing():
    f = StreamFramer(framing="segment")
    (fr,) = f.feed(C, 0, tcp_frame(b"\x38" + bytes(13)), 0)
    assert fr.opcode_byte == 0x38 and fr.payload_len == 14
    with pytest.raises(ValueError):
        StreamFramer(framing="bogus")


def test_out_of_order_segments_are_buffered():
    unit = tcp_frame(b"\x38" + bytes(13))
    f = StreamFramer()
    assert f.feed(C, 0, unit, 0)
    second = tcp_frame(b"\x28" + bytes(49))
    third = tcp_frame(b"\x20" + bytes(99))
    assert f.feed(C, 16 + len(second), third, 0) == []
    frames = f.feed(C, 16, second, 0)
    assert [x.opcode_byte for x in frames] == [0x28, 0x20]


def test_retransmission_is_ignored():
    unit = tcp_frame(b"\x38" + bytes(13))
    f = StreamFramer()
    f.feed(C, 0, unit, 0)
    assert f.feed(C, 0, unit, 0) == []


def test_sequence_wraparound():
    unit = tcp_frame(b"\x38" + bytes(13))
    f = StreamFramer()
    start = 0xFFFFFFFF - 5
    assert len(f.feed(C, start, unit, 0)) == 1
    assert len(f.feed(C, (start + 16) & 0xFFFFFFFF, unit, 0)) == 1


def test_reassembly_overflow():
    f = StreamFramer(cap=100)
    f.feed(C, 0, tcp_frame(b"\x38" + bytes(13)), 0)
    with pytest.raises(Overflow):
        f.feed(C, 1000, bytes(200), 0)


@settings(max_examples=100)
@given(st.lists(st.binary(min_size=1, max_size=1600), min_size=1, max_size=12), st.data())
def test_framing_soundness(packets, data):
    """Re-prefixing emitted frames reproduces the consumed stream, for any segmentation."""
    stream = b"".join(tcp_frame(p) for p in packets)
    cuts = sorted(data.draw(st.sets(st.integers(1, max(1, len(stream) - 1)), max_size=8)))
    bounds = [0, *cuts, len(stream)]
    segs = [stream[a:b] for a, b in zip(bounds, bounds[1:]) if b > a]
    f = StreamFramer(framing="stream")
    out = []
    seq = 0
    for s in segs:
        out += f.feed(C, seq, s, 0)
        seq += len(s)
    assert [(x.payload_len, x.opcode_byte) for x in out] == [(len(p), p[0]) for p in packets]
    units, tail = split_stream(stream)
    assert b"".join(tcp_frame(u) for u in units) + tail == stream


def test_frame_udp():
    assert frame_udp(C, b"\x38\xaa\xbb").opcode_byte == 0x38
    fr = frame_udp(C, b"\x28")
    assert (fr.payload_len, fr.opcode_byte) == (1, 0x28)
    assert frame_udp(C, b"") is None


def test_orientation_and_symmetry():
    table = FlowTable(10)
    st1 = assign_flow(tcp(A, B, 5000, 1194, b"x"), table)
    st2 = assign_flow(tcp(B, A, 1194, 5000, b"y"), table)
    assert st1 is st2
    assert st1.key == FlowKey("10.0.0.1", 5000, "10.0.0.2", 1194, Transport.TCP)


def test_syn_does_not_create_flow_and_payload_sender_is_client():
    table = FlowTable(10)
    assert assign_flow(tcp(A, B, 5000, 1194, flags=TCP_SYN), table) is None
    assert assign_flow(tcp(B, A, 1194, 5000, flags=TCP_SYN | TCP_ACK), table) is None
    st = assign_flow(tcp(B, A, 1194, 5000, b"banner"), table)
    assert st.key.client_addr == "10.0.0.2" and st.key.client_port == 1194


def test_distinct_tuples_get_distinct_states():
    table = FlowTable(10)
    a = assign_flow(tcp(A, B, 5000, 1194, b"x"), table)
    b = assign_flow(tcp(A, B, 5001, 1194, b"x"), table)
    assert a is not b and len(table) == 2


def test_eviction_counts():
    table = FlowTable(capacity=5)
    for port in range(12):
        assign_flow(tcp(A, B, 6000 + port, 1194, b"x"), table)
    assert table.created == 12
    assert table.evictions == table.created - table.capacity
    assert len(table) == 5


def test_frame_tcp_wrapper():
    table = FlowTable(10)
    pkt = tcp(A, B, 5000, 1194, tcp_frame(b"\x38" + bytes(13)), seq=10)
    st = assign_flow(pkt, table)
    (fr,) = frame_tcp(st, pkt)
    assert fr.direction is C and fr.opcode_byte == 0x38


def test_flow_end_on_rst_and_double_fin():
    table = FlowTable(10)
    st = assign_flow(tcp(A, B, 5000, 1194, b"x"), table)
    assert not table.is_flow_end(st, tcp(A, B, 5000, 1194, flags=TCP_FIN))
    assert table.is_flow_end(st, tcp(B, A, 1194, 5000, flags=TCP_FIN | TCP_ACK))
    st2 = assign_flow(tcp(A, B, 5001, 1194, b"x"), table)
    assert table.is_flow_end(st2, tcp(B, A, 1194, 5001, flags=TCP_RST))


def test_window_bound_and_latch():
    table = FlowTable(10, window=5)
    st = assign_flow(tcp(A, B, 5000, 1194, b"x"), table)
    for _ in range(8):
        st.append(frame_udp(C, b"\x38"))
    assert len(st.frames) == 5
    table.settle(st, Status.CLEARED)
    assert not st.append(frame_udp(C, b"\x38"))
    assert table.lookup(tcp(A, B, 5000, 1194)) is st


def _pkts(n):
    return [RawPacket(i, Transport.UDP, A, B, 1, 2, bytes([i % 256])) for i in range(n)]


def test_loss_identity_and_total():
    pk = _pkts(50)
    assert list(apply_loss(pk, 0.0, 1)) == pk
    assert list(apply_loss(pk, 1.0, 1)) == []
    with pytest.raises(ValueError):
        list(apply_loss(pk, 1.5, 1))


def test_loss_rate_binomial_bound():
    n, p = 10_000, 0.1
    kept = sum(1 for _ in apply_loss(_pkts(n), p, 7))
    sigma = math.sqrt(n * p * (1 - p))
    assert abs(kept - n * (1 - p)) <= 3 * sigma


@given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**31))
def test_loss_survivors_nest(p1, p2, seed):
    lo, hi = sorted((p1, p2))
    pk = _pkts(300)
    a = {x.ts_ns for x in apply_loss(pk, lo, seed)}
    b = {x.ts_ns for x in apply_loss(pk, hi, seed)}
    assert b <= a
    assert [x.ts_ns for x in apply_loss(pk, lo, seed)] == sorted(a)


def test_sampling():
    key = FlowKey("10.0.0.1", 5000, "10.0.0.2", 1194, Transport.TCP)
    rev = FlowKey("10.0.0.2", 1194, "10.0.0.1", 5000, Transport.TCP)
    assert sample_flows(key, 1.0)
    for seed in range(20):
        assert sample_flows(key, 0.3, seed) == sample_flows(rev, 0.3, seed)
    with pytest.raises(ValueError):
        sample_flows(key, 0.0)


def test_sampling_rate_monte_carlo():
    rng = random.Random(42)
    n = 100_000
    hits = sum(
        sample_pair(ipaddress.IPv4Address(rng.getrandbits(32)), ipaddress.IPv4Address(rng.getrandbits(32)), 0.125, 3)
        for _ in range(n)
    )
    assert abs(hits / n - 0.125) <= 0.01


def test_sampling_ignores_ports_in_table():
    table = FlowTable(100, sample_rate=0.5, seed=11)
    states = [table.assign(tcp(A, B, 7000 + i, 1194, b"x")) for i in range(10)]
    assert len({s.status for s in states}) == 1
