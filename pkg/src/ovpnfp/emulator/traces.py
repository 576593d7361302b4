"""Synthetic session traces: vanilla/obfuscated OpenVPN and non-VPN personas.

A trace is a list of transport payloads with directions and inter-arrival
gaps.  TCP OpenVPN payloads carry the 2-byte length prefix; UDP payloads are
bare OpenVPN packets.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field, replace

from .. import protocol
from ..flows import Direction
from ..pcap import Transport
from .config import EmulatorConfig, ObfsKind, Persona
from .obfuscation import obfuscate

C2S, S2C = Direction.C2S, Direction.S2C


@dataclass(slots=True)
class TraceFrame:
    direction: Direction
    payload: bytes
    gap: float = 0.0


@dataclass
class SyntheticTrace:
    frames: list[TraceFrame]
    transport: Transport
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)

    def sizes(self) -> list[int]:
        return [len(f.payload) for f in self.frames]

    def directions(self) -> list[Direction]:
        return [f.direction for f in self.frames]


# --- OpenVPN sessions ----------------------------------------------------------


def _ack_bin_plan(rng: random.Random, n: int) -> list[int]:
    """Frame positions that carry a P_ACK, respecting the early-bin profile."""
    counts = [rng.randint(1, 3), rng.randint(2, 5), rng.randint(0, 3), rng.randint(0, 2), rng.randint(0, 1)]
    positions = {2}
    positions.update(rng.sample(range(4, 10), counts[0] - 1))
    for b, k in enumerate(counts[1:], start=1):
        slots = [p for p in range(10 * b, 10 * (b + 1)) if p < n]
        positions.update(rng.sample(slots, min(k, len(slots))))
    return sorted(p for p in positions if p < n)


def openvpn_packets(cfg: EmulatorConfig, n: int, rng: random.Random) -> list[tuple[Direction, bytes]]:
    """Plain OpenVPN packets (no TCP prefix, no obfuscation) for one session."""
    if n < 4:
        raise ValueError("an OpenVPN session trace needs at least 4 packets")
    extra = cfg.control_overhead
    ack = cfg.ack_size
    sid = {C2S: rng.randbytes(8), S2C: rng.randbytes(8)}

    def packet(op: int, size: int, d: Direction) -> bytes:
        head = bytes([op]) + sid[d]
        return head + rng.randbytes(max(0, size - len(head)))

    acks = _ack_bin_plan(rng, n)
    hs_end = max(acks[-1] + 1 + rng.randint(0, 3), 12)
    ack_set = set(acks)

    out = [
        (C2S, packet(protocol.CLIENT_RESET, protocol.CLIENT_RESET_LEN + extra, C2S)),
        (S2C, packet(protocol.SERVER_RESET, protocol.SERVER_RESET_LEN + extra, S2C)),
        (C2S, packet(protocol.ACK, ack, C2S)),
        (C2S, packet(protocol.CONTROL, rng.randint(ack + 8, 400), C2S)),
    ]
    last_ctrl = C2S
    for i in range(4, n):
        if i in ack_set:
            d = S2C if last_ctrl is C2S else C2S
            out.append((d, packet(protocol.ACK, ack, d)))
        elif i < hs_end:
            d = S2C if rng.random() < 0.5 else C2S
            last_ctrl = d
            out.append((d, packet(protocol.CONTROL, rng.randint(ack + 8, 1250), d)))
        else:
            d = S2C if rng.random() < 0.6 else C2S
            size = rng.randint(60, 1400)
            while size == ack:
                size = rng.randint(60, 1400)
            out.append((d, packet(protocol.DATA, size, d)))
    return out


def _gaps(rng: random.Random, n: int, hs: int = 40) -> list[float]:
    return [0.0] + [rng.expovariate(1 / (0.02 if i < hs else 0.004)) for i in range(1, n)]


def _openvpn_trace(cfg: EmulatorConfig, n: int, seed: int) -> SyntheticTrace:
    rng = random.Random(seed)
    packets = openvpn_packets(cfg, n, rng)
    obf = cfg.obfuscation
    if obf.kind is ObfsKind.XOR:
        packets = [(d, obfuscate(obf.xor_mode, p, obf.key)) for d, p in packets]
    if cfg.transport is Transport.TCP:
        # The length prefix is added after obfuscation and stays plaintext.
        packets = [(d, protocol.tcp_frame(p)) for d, p in packets]
    gaps = _gaps(rng, len(packets))
    trace = SyntheticTrace([TraceFrame(d, p, g) for (d, p), g in zip(packets, gaps)], cfg.transport)
    if obf.kind is ObfsKind.TUNNEL:
        trace = wrap_tunnel(trace, obf.overhead, obf.handshake_frames, seed=seed)
    elif obf.kind is ObfsKind.PADDED:
        trace = wrap_padded(trace, obf.overhead, obf.pad_max, obf.seed ^ seed, handshake_frames=obf.handshake_frames)
    return trace


# --- tunnels ---------------------------------------------------------------------


def _record(rng: random.Random, size: int, content_type: int = 0x17, version: int = 0x0303) -> bytes:
    if size < 5:
        return rng.randbytes(size)
    return struct.pack(">BHH", content_type, version, size - 5) + rng.randbytes(size - 5)


def _tunnel_handshake(rng: random.Random, count: int) -> list[TraceFrame]:
    frames = []
    for i in range(count):
        d = C2S if i % 2 == 0 else S2C
        if i == count - 1:
            d = S2C
        size = 517 if i == 0 else (rng.randint(900, 1400) if d is S2C else rng.randint(60, 300))
        frames.append(TraceFrame(d, _record(rng, size, 0x16, 0x0301 if i == 0 else 0x0303), rng.expovariate(50)))
    return frames


def wrap_tunnel(trace: SyntheticTrace, overhead: int, handshake_frames: int, *, seed: int = 0) -> SyntheticTrace:
    """Encrypted tunnel without padding: one opaque record per payload,
    ``overhead`` bytes longer, after ``handshake_frames`` tunnel setup frames."""
    if overhead < 0 or handshake_frames < 0:
        raise ValueError("overhead and handshake_frames must be non-negative")
    rng = random.Random(("tunnel", seed).__repr__())
    frames = _tunnel_handshake(rng, handshake_frames)
    frames += [TraceFrame(f.direction, _record(rng, len(f.payload) + overhead), f.gap) for f in trace.frames]
    meta = dict(trace.meta, tunnel={"overhead": overhead, "handshake_frames": handshake_frames})
    return SyntheticTrace(frames, trace.transport, meta)


def wrap_padded(trace: SyntheticTrace, overhead: int, pad_max: int, seed: int, *,
                handshake_frames: int = 0) -> SyntheticTrace:
    """Tunnel with per-frame uniform random padding in ``[0, pad_max]``."""
    if overhead < 0 or pad_max < 0:
        raise ValueError("overhead and pad_max must be non-negative")
    rng = random.Random(("padded", seed).__repr__())
    frames = _tunnel_handshake(rng, handshake_frames)
    for f in trace.frames:
        size = len(f.payload) + overhead + rng.randint(0, pad_max)
        frames.append(TraceFrame(f.direction, rng.randbytes(size), f.gap))
    meta = dict(trace.meta, padded={"overhead": overhead, "pad_max": pad_max, "seed": seed})
    return SyntheticTrace(frames, trace.transport, meta)


# --- non-VPN personas ---------------------------------------------------------------

_WORDS = (b"the quick brown fox jumps over lazy dog lorem ipsum dolor sit amet consectetur "
          b"adipiscing elit sed do eiusmod tempor incididunt ut labore et dolore magna aliqua").split()


def _text(rng: random.Random, size: int) -> bytes:
    out = bytearray(b"<html><body><p>")
    while len(out) < size:
        out += rng.choice(_WORDS) + (b"</p><p>" if rng.random() < 0.05 else b" ")
    return bytes(out[:size])


def _segments(rng: random.Random, d: Direction, blob: bytes, mss: int = 1448) -> list[tuple[Direction, bytes]]:
    return [(d, blob[i : i + mss]) for i in range(0, len(blob), mss)]


def _http(rng: random.Random, n: int) -> list[tuple[Direction, bytes]]:
    out: list[tuple[Direction, bytes]] = []
    while len(out) < n:
        path = "/" + "/".join(rng.choice(["img", "static", "api", "css", "js", "index"]) for _ in range(rng.randint(1, 3)))
        req = (f"GET {path}?v={rng.randint(1, 99999)} HTTP/1.1\r\nHost: www.example{rng.randint(1, 9)}.com\r\n"
               f"User-Agent: Mozilla/5.0\r\nAccept: */*\r\nCookie: id={rng.randbytes(rng.randint(4, 40)).hex()}\r\n\r\n").encode()
        out.append((C2S, req))
        body_len = rng.choice([rng.randint(200, 3000), rng.randint(3000, 40000)])
        body = _text(rng, body_len) if rng.random() < 0.5 else rng.randbytes(body_len)
        head = (f"HTTP/1.1 200 OK\r\nServer: nginx\r\nContent-Length: {body_len}\r\n"
                f"Content-Type: text/html\r\n\r\n").encode()
        out.extend(_segments(rng, S2C, head + body))
    return out[:n]


def _client_hello(rng: random.Random) -> bytes:
    from ..prober.probes import tls_client_hello

    return tls_client_hello(rng.randbytes(32), rng.randbytes(32), rng.randbytes(32))


def _tls(rng: random.Random, n: int) -> list[tuple[Direction, bytes]]:
    out = [(C2S, _client_hello(rng))]
    server_flight = _record(rng, rng.randint(2500, 5000), 0x16, 0x0303)
    out.extend(_segments(rng, S2C, server_flight))
    out.append((C2S, bytes.fromhex("140303000101") + _record(rng, rng.randint(45, 100), 0x17)))
    while len(out) < n:
        if rng.random() < 0.35:
            out.append((C2S, _record(rng, rng.randint(40, 900))))
        else:
            blob = b"".join(_record(rng, rng.randint(30, 16000)) for _ in range(rng.randint(1, 3)))
            out.extend(_segments(rng, S2C, blob))
    return out[:n]


def _ssh(rng: random.Random, n: int) -> list[tuple[Direction, bytes]]:
    out = [(S2C, b"SSH-2.0-OpenSSH_8.9p1 Ubuntu-3\r\n"), (C2S, b"SSH-2.0-OpenSSH_9.0\r\n")]
    for d in (C2S, S2C):
        body = bytes([20]) + rng.randbytes(rng.randint(900, 1400))
        out.append((d, struct.pack(">IB", len(body) + 5, 4) + body + bytes(4)))
    plaintext_len = rng.random() < 0.5  # AES-GCM leaves the length field visible
    while len(out) < n:
        d = C2S if rng.random() < 0.5 else S2C
        size = rng.choice([36, 52, 68, 84, rng.randint(100, 1400)])
        if plaintext_len:
            out.append((d, struct.pack(">I", size - 4 - 16) + rng.randbytes(size - 4)))
        else:
            out.append((d, rng.randbytes(size)))
    return out[:n]


def _echo(rng: random.Random, n: int) -> list[tuple[Direction, bytes]]:
    out = []
    while len(out) < n:
        msg = _text(rng, rng.randint(8, 1200)) if rng.random() < 0.5 else rng.randbytes(rng.randint(8, 1200))
        out += [(C2S, msg), (S2C, msg)]
    return out[:n]


def _random(rng: random.Random, n: int) -> list[tuple[Direction, bytes]]:
    return [(C2S if rng.random() < 0.5 else S2C, rng.randbytes(rng.randint(1, 1400))) for _ in range(n)]


_NEGATIVE = {
    Persona.HTTP: _http,
    Persona.TLS: _tls,
    Persona.SSH: _ssh,
    Persona.ECHO: _echo,
    Persona.RANDOM: _random,
    Persona.OBFS4LIKE: _random,
}


def generate_trace(cfg: EmulatorConfig, n_packets: int = 200, seed: int = 0) -> SyntheticTrace:
    """Deterministic synthetic trace for ``cfg.persona`` under ``seed``."""
    if n_packets < 4:
        raise ValueError("n_packets must be at least 4")
    meta = {"persona": cfg.persona.value, "transport": cfg.transport.value, "seed": seed,
            "obfuscation": cfg.obfuscation.describe(), "ack_size": cfg.ack_size}
    if cfg.persona in (Persona.OPENVPN, Persona.PORTSHARED):
        trace = _openvpn_trace(cfg, n_packets, seed)
        trace.meta = dict(trace.meta, **meta)
        return trace
    rng = random.Random(seed)
    payloads = _NEGATIVE[cfg.persona](rng, n_packets)
    gaps = _gaps(rng, len(payloads), hs=4)
    return SyntheticTrace([TraceFrame(d, p, g) for (d, p), g in zip(payloads, gaps)], cfg.transport, meta)


def vanilla(transport: Transport = Transport.TCP, **kw) -> EmulatorConfig:
    return EmulatorConfig(transport=transport, persona=Persona.OPENVPN, **kw)


def with_obfuscation(cfg: EmulatorConfig, **kw) -> EmulatorConfig:
    return replace(cfg, obfuscation=replace(cfg.obfuscation, **kw))
