"""Render synthetic traces as classic pcap captures."""

from __future__ import annotations

import heapq
import ipaddress
import os
import random
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator

from ..flows import Direction
from ..pcap import TCP_ACK, TCP_FIN, TCP_PSH, TCP_SYN, PcapWriter, Transport, build_frame, ipv4_checksum
from .traces import SyntheticTrace

BASE_TIME_NS = 1_628_900_000 * 1_000_000_000
MSS = 1448


@dataclass(frozen=True)
class Endpoint:
    addr: str
    port: int

    @property
    def packed(self) -> bytes:
        return ipaddress.ip_address(self.addr).packed


CLIENT = Endpoint("10.0.0.1", 40000)
SERVER = Endpoint("10.0.0.2", 1194)


def trace_frames(trace: SyntheticTrace, client: Endpoint = CLIENT, server: Endpoint = SERVER,
                 t0_ns: int = BASE_TIME_NS, *, mss: int = MSS, seed: int = 0,
                 handshake: bool = True, close: bool = True) -> list[tuple[int, bytes]]:
    """Timestamped link-layer frames for one session.

    TCP sessions get a three-way handshake, MSS-sized segments, a pure ACK
    from the receiver after every second data segment, and a FIN exchange.
    """
    c, s = client.packed, server.packed
    ends = {Direction.C2S: (c, client.port, s, server.port), Direction.S2C: (s, server.port, c, client.port)}
    out: list[tuple[int, bytes]] = []
    t = t0_ns
    if trace.transport is Transport.UDP:
        for f in trace.frames:
            t += int(f.gap * 1e9)
            src, sp, dst, dp = ends[f.direction]
            out.append((t, build_frame(Transport.UDP, src, dst, sp, dp, f.payload)))
        return out

    rng = random.Random(seed)
    seq = {Direction.C2S: rng.getrandbits(32), Direction.S2C: rng.getrandbits(32)}
    unacked = {Direction.C2S: 0, Direction.S2C: 0}

    def emit(d: Direction, payload: bytes = b"", flags: int = TCP_ACK) -> None:
        nonlocal t
        src, sp, dst, dp = ends[d]
        other = Direction(1 - d)
        out.append((t, build_frame(Transport.TCP, src, dst, sp, dp, payload, seq=seq[d], ack=seq[other], flags=flags)))
        seq[d] = (seq[d] + len(payload) + (1 if flags & (TCP_SYN | TCP_FIN) else 0)) & 0xFFFFFFFF
        t += 1000

    if handshake:
        emit(Direction.C2S, flags=TCP_SYN)
        emit(Direction.S2C, flags=TCP_SYN | TCP_ACK)
        emit(Direction.C2S)
    for f in trace.frames:
        t += int(f.gap * 1e9)
        for i in range(0, len(f.payload), mss):
            emit(f.direction, f.payload[i : i + mss], TCP_ACK | TCP_PSH)
            unacked[f.direction] += 1
            if unacked[f.direction] >= 2:
                unacked[f.direction] = 0
                emit(Direction(1 - f.direction))
    if close:
        emit(Direction.C2S, flags=TCP_FIN | TCP_ACK)
        emit(Direction.S2C, flags=TCP_FIN | TCP_ACK)
        emit(Direction.C2S)
    return out


@dataclass
class Session:
    trace: SyntheticTrace
    client: Endpoint = CLIENT
    server: Endpoint = SERVER
    t0_ns: int = BASE_TIME_NS
    seed: int = 0


def write_sessions(out: str | os.PathLike | BinaryIO, sessions: Iterable[Session], *, nanosecond: bool = False) -> int:
    """Write sessions into one capture, interleaved by timestamp; returns record count."""
    streams = [trace_frames(s.trace, s.client, s.server, s.t0_ns, seed=s.seed) for s in sessions]
    merged: Iterator[tuple[int, bytes]] = heapq.merge(*streams, key=lambda x: x[0])
    if isinstance(out, (str, os.PathLike)):
        with open(out, "wb") as f:
            return _dump(f, merged, nanosecond)
    return _dump(out, merged, nanosecond)


def _dump(f: BinaryIO, frames: Iterable[tuple[int, bytes]], nanosecond: bool) -> int:
    w = PcapWriter(f, nanosecond=nanosecond)
    n = 0
    for ts, frame in frames:
        w.write(ts, frame)
        n += 1
    return n


def write_trace(path: str | os.PathLike, trace: SyntheticTrace, *, seed: int = 0) -> int:
    port = SERVER.port if trace.meta.get("persona") in (None, "openvpn", "portshared") else 443
    return write_sessions(path, [Session(trace, CLIENT, Endpoint(SERVER.addr, port), seed=seed)])


def session_endpoints(index: int, server_port: int = 1194) -> tuple[Endpoint, Endpoint]:
    """Distinct synthetic client/server pair for the index-th session of a corpus."""
    client = Endpoint(str(ipaddress.ip_address("10.0.0.0") + 16 + (index % 200)), 20000 + index % 40000)
    server = Endpoint(str(ipaddress.ip_address("10.1.0.0") + 1 + index), server_port)
    return client, server


def bulk_capture(path: str | os.PathLike, target_bytes: int, templates: list[SyntheticTrace], *,
                 seed: int = 0) -> tuple[int, int]:
    """Fill a capture of roughly ``target_bytes`` by replaying session templates.

    Each replay moves the session to a fresh client port and server address
    by patching the rendered frames, so no two replays share a flow.
    Returns ``(records, sessions)``.
    """
    rendered = []
    for i, tr in enumerate(templates):
        client, server = session_endpoints(0)
        frames = trace_frames(tr, client, server, 0, seed=seed + i)
        rendered.append(frames)
    records = sessions = 0
    written = 24
    t = BASE_TIME_NS
    c_port_off, s_ip_off = 34, 30  # Ethernet + IPv4 offsets of sport / dst address
    with open(path, "wb") as f:
        w = PcapWriter(f)
        while written < target_bytes:
            frames = rendered[sessions % len(rendered)]
            client, server = session_endpoints(sessions)
            cport = client.port.to_bytes(2, "big")
            saddr = server.packed
            last = 0
            for ts, frame in frames:
                b = bytearray(frame)
                # Client-originated frames carry the client port first.
                if b[26:30] == CLIENT_TEMPLATE_ADDR:
                    b[c_port_off : c_port_off + 2] = cport
                    b[s_ip_off : s_ip_off + 4] = saddr
                else:
                    b[c_port_off + 2 : c_port_off + 4] = cport
                    b[26:30] = saddr
                _refresh_ip_checksum(b)
                w.write(t + ts, bytes(b))
                written += 16 + len(b)
                records += 1
                last = ts
            t += last + 1_000_000
            sessions += 1
    return records, sessions


CLIENT_TEMPLATE_ADDR = ipaddress.ip_address(session_endpoints(0)[0].addr).packed


def _refresh_ip_checksum(b: bytearray) -> None:
    b[24:26] = b"\0\0"
    b[24:26] = ipv4_checksum(bytes(b[14:34])).to_bytes(2, "big")
