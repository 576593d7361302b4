"""Flow demultiplexing, TCP stream reassembly and OpenVPN-layer framing."""

from __future__ import annotations

import hashlib
import ipaddress
import random
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Iterable, Iterator

from .pcap import TCP_FIN, TCP_RST, RawPacket, Transport

DEFAULT_WINDOW = 100
DEFAULT_REASSEMBLY_CAP = 64 * 1024
DEFAULT_FRAME_SANITY_MAX = 16384
DEFAULT_TABLE_CAPACITY = 200_000


class Direction(IntEnum):
    C2S = 0
    S2C = 1

    @property
    def arrow(self) -> str:
        return "C->S" if self is Direction.C2S else "S->C"


class Status(str, Enum):
    OBSERVING = "observing"
    FLAGGED = "flagged"
    CLEARED = "cleared"
    DROPPED = "dropped"  # reassembly overflow; never flagged
    UNSAMPLED = "unsampled"


@dataclass(frozen=True)
class FlowKey:
    client_addr: str
    client_port: int
    server_addr: str
    server_port: int
    transport: Transport

    def reversed_tuple(self) -> tuple:
        return (self.server_addr, self.server_port, self.client_addr, self.client_port)


@dataclass(slots=True)
class FramedPacket:
    direction: Direction
    payload_len: int
    opcode_byte: int
    ts_ns: int = 0


# --- TCP framing -------------------------------------------------------------


def scan_units(buf: bytes | bytearray, sanity_max: int = DEFAULT_FRAME_SANITY_MAX):
    """Split a length-prefixed byte stream into complete units.

    Returns ``(units, consumed, bad)`` where ``units`` is a list of
    ``(start, length)`` pairs locating each unit's payload in ``buf``,
    ``consumed`` counts the bytes of complete units and ``bad`` is True when
    a prefix declared 0 or more than ``sanity_max`` bytes.
    """
    units = []
    pos = 0
    n = len(buf)
    while n - pos >= 2:
        length = (buf[pos] << 8) | buf[pos + 1]
        if length == 0 or length > sanity_max:
            return units, pos, True
        if n - pos - 2 < length:
            break
        units.append((pos + 2, length))
        pos += 2 + length
    return units, pos, False


def split_stream(data: bytes, sanity_max: int = DEFAULT_FRAME_SANITY_MAX) -> tuple[list[bytes], bytes]:
    """Complete unit payloads of ``data`` plus the unconsumed tail."""
    units, consumed, _ = scan_units(data, sanity_max)
    return [data[s : s + n] for s, n in units], data[consumed:]


def _segment_frame(direction: Direction, payload: bytes, ts_ns: int) -> FramedPacket:
    # Fallback framing treats each segment as [2-byte prefix][packet].
    if len(payload) > 2:
        return FramedPacket(direction, len(payload) - 2, payload[2], ts_ns)
    return FramedPacket(direction, len(payload), payload[-1], ts_ns)


class Overflow(Exception):
    """Out-of-order bytes exceeded the per-direction reassembly cap."""


FRAMING_MODES = ("auto", "stream", "segment")


class StreamFramer:
    """Per-direction TCP reassembly and length-prefix framing.

    The first delivered segment decides the mode: if it holds a whole number
    of well-formed units the stream is framed by its length prefixes,
    otherwise (and whenever a later prefix is implausible) every segment is
    framed on its own with the opcode at offset 2.
    """

    __slots__ = ("next_seq", "ooo", "ooo_bytes", "buf", "mode", "cap", "sanity_max")

    def __init__(self, cap: int = DEFAULT_REASSEMBLY_CAP, sanity_max: int = DEFAULT_FRAME_SANITY_MAX,
                 framing: str = "auto"):
        if framing not in FRAMING_MODES:
            raise ValueError(f"framing must be one of {FRAMING_MODES}")
        self.next_seq: int | None = None
        self.ooo: dict[int, bytes] = {}
        self.ooo_bytes = 0
        self.buf = bytearray()
        # "init" decides stream vs segment framing on the first delivered segment.
        self.mode = {"auto": "init", "stream": "stream", "segment": "segment"}[framing]
        self.cap = cap
        self.sanity_max = sanity_max

    def feed(self, direction: Direction, seq: int, payload: bytes, ts_ns: int) -> list[FramedPacket]:
        if self.next_seq is None:
            self.next_seq = seq
        delta = ((seq - self.next_seq + 0x80000000) & 0xFFFFFFFF) - 0x80000000
        if delta < 0:
            if -delta >= len(payload):
                return []
            payload = payload[-delta:]
            delta = 0
        if delta > 0:
            if self.mode == "segment":
                # Segment framing needs no contiguity; skip the hole.
                self.next_seq = (seq + len(payload)) & 0xFFFFFFFF
                return [_segment_frame(direction, payload, ts_ns)]
            if seq not in self.ooo:
                self.ooo_bytes += len(payload)
                if self.ooo_bytes > self.cap:
                    raise Overflow
                self.ooo[seq] = payload
            return []

        out = self._deliver(direction, payload, ts_ns)
        while self.ooo:
            nxt = self.ooo.pop(self.next_seq, None)
            if nxt is None:
                break
            self.ooo_bytes -= len(nxt)
            out.extend(self._deliver(direction, nxt, ts_ns))
        return out

    def _deliver(self, direction: Direction, payload: bytes, ts_ns: int) -> list[FramedPacket]:
        self.next_seq = (self.next_seq + len(payload)) & 0xFFFFFFFF
        if self.mode == "segment":
            return [_segment_frame(direction, payload, ts_ns)]
        buf = self.buf
        buf += payload
        units, consumed, bad = scan_units(buf, self.sanity_max)
        if self.mode == "init":
            if bad or consumed != len(buf):
                self._abandon()
                return [_segment_frame(direction, payload, ts_ns)]
            self.mode = "stream"
        frames = [FramedPacket(direction, n, buf[s], ts_ns) for s, n in units]
        if bad:
            self._abandon()
            if not frames:
                # The segment that broke framing is the first one framed on its own.
                frames.append(_segment_frame(direction, payload, ts_ns))
        elif consumed:
            del buf[:consumed]
        return frames

    def _abandon(self) -> None:
        self.mode = "segment"
        self.buf = bytearray()
        self.ooo.clear()
        self.ooo_bytes = 0


def frame_udp(direction: Direction, payload: bytes, ts_ns: int = 0) -> FramedPacket | None:
    if not payload:
        return None
    return FramedPacket(direction, len(payload), payload[0], ts_ns)


# --- flow state ----------------------------------------------------------------


@dataclass(eq=False)
class FlowState:
    key: FlowKey
    client: tuple[bytes, int]
    window: int = DEFAULT_WINDOW
    framed_count: int = 0
    frames: list[FramedPacket] = field(default_factory=list)
    status: Status = Status.OBSERVING
    framers: tuple[StreamFramer, StreamFramer] | None = None
    fins: int = 0
    first_ts_ns: int = 0
    last_ts_ns: int = 0
    ck: tuple = ()

    def direction_of(self, pkt: RawPacket) -> Direction:
        if pkt.src == self.client[0] and pkt.sport == self.client[1]:
            return Direction.C2S
        return Direction.S2C

    def append(self, frame: FramedPacket) -> bool:
        """Record a frame; returns False once the window is full or decided."""
        if self.status is not Status.OBSERVING or len(self.frames) >= self.window:
            return False
        self.frames.append(frame)
        self.framed_count += 1
        return True

    def release(self, status: Status) -> None:
        """Latch a final status and drop per-flow buffers."""
        self.status = status
        self.framers = None
        self.frames = []

    def frame_tcp(self, pkt: RawPacket, direction: Direction | None = None) -> list[FramedPacket]:
        if direction is None:
            direction = self.direction_of(pkt)
        if self.framers is None:
            return []
        return self.framers[direction].feed(direction, pkt.seq, pkt.payload, pkt.ts_ns)


def _addr(raw: bytes) -> str:
    return str(ipaddress.ip_address(raw))


def sample_pair(addr_a: bytes | str, addr_b: bytes | str, rate: float, seed: int = 0) -> bool:
    """Deterministic keep/drop decision for an unordered IP pair."""
    if rate >= 1.0:
        return True
    a = ipaddress.ip_address(addr_a).packed
    b = ipaddress.ip_address(addr_b).packed
    lo, hi = sorted((a, b))
    digest = hashlib.blake2b(lo + b"|" + hi, digest_size=8, key=seed.to_bytes(8, "big", signed=True)).digest()
    return int.from_bytes(digest, "big") < rate * 2**64


def sample_flows(key: FlowKey, rate: float, seed: int = 0) -> bool:
    if not 0 < rate <= 1:
        raise ValueError("sample rate must be in (0, 1]")
    return sample_pair(key.client_addr, key.server_addr, rate, seed)


def apply_loss(stream: Iterable[RawPacket], p: float, seed: int = 0) -> Iterator[RawPacket]:
    """Drop each packet independently with probability ``p``.

    One uniform draw is made per packet, so for a fixed seed the survivors
    at a higher ``p`` are a subset of the survivors at a lower ``p``.
    """
    if not 0 <= p <= 1:
        raise ValueError("loss probability must be in [0, 1]")
    if p == 0:
        yield from stream
        return
    draw = random.Random(seed).random
    for pkt in stream:
        if draw() >= p:
            yield pkt


class FlowTable:
    """Bounded table of flows under observation.

    Only observing flows occupy the table; decided flows move to a latch
    cache of the same capacity so late packets are ignored cheaply.
    """

    def __init__(
        self,
        capacity: int = DEFAULT_TABLE_CAPACITY,
        window: int = DEFAULT_WINDOW,
        *,
        reassembly_cap: int = DEFAULT_REASSEMBLY_CAP,
        frame_sanity_max: int = DEFAULT_FRAME_SANITY_MAX,
        sample_rate: float = 1.0,
        seed: int = 0,
        framing: str = "auto",
    ) -> None:
        if capacity < 1:
            raise ValueError("flow table capacity must be positive")
        self.capacity = capacity
        self.window = window
        self.reassembly_cap = reassembly_cap
        self.frame_sanity_max = frame_sanity_max
        self.sample_rate = sample_rate
        self.seed = seed
        self.framing = framing
        self.active: OrderedDict[tuple, FlowState] = OrderedDict()
        self.latched: OrderedDict[tuple, FlowState] = OrderedDict()
        self.created = 0
        self.evictions = 0

    @staticmethod
    def canonical(pkt: RawPacket) -> tuple:
        a = (pkt.src, pkt.sport)
        b = (pkt.dst, pkt.dport)
        return (pkt.transport, a, b) if a <= b else (pkt.transport, b, a)

    def __len__(self) -> int:
        return len(self.active)

    def lookup(self, pkt: RawPacket) -> FlowState | None:
        ck = self.canonical(pkt)
        return self.active.get(ck) or self.latched.get(ck)

    def assign(self, pkt: RawPacket) -> FlowState | None:
        """Existing state for the packet's flow, or a new one for payload packets.

        Payload-less packets never create flows.  Returns None for them.
        """
        ck = self.canonical(pkt)
        st = self.active.get(ck)
        if st is not None:
            return st
        st = self.latched.get(ck)
        if st is not None or not pkt.payload:
            return st
        key = FlowKey(_addr(pkt.src), pkt.sport, _addr(pkt.dst), pkt.dport, pkt.transport)
        st = FlowState(key, (pkt.src, pkt.sport), self.window, first_ts_ns=pkt.ts_ns, ck=ck)
        self.created += 1
        if self.sample_rate < 1.0 and not sample_pair(pkt.src, pkt.dst, self.sample_rate, self.seed):
            st.release(Status.UNSAMPLED)
            self._latch(ck, st)
            return st
        if pkt.transport is Transport.TCP:
            st.framers = (
                StreamFramer(self.reassembly_cap, self.frame_sanity_max, self.framing),
                StreamFramer(self.reassembly_cap, self.frame_sanity_max, self.framing),
            )
        if len(self.active) >= self.capacity:
            self.active.popitem(last=False)
            self.evictions += 1
        self.active[ck] = st
        return st

    def settle(self, st: FlowState, status: Status) -> None:
        """Move a decided flow out of the active table."""
        ck = st.ck
        st.release(status)
        if self.active.pop(ck, None) is not None:
            self._latch(ck, st)

    def _latch(self, ck: tuple, st: FlowState) -> None:
        self.latched[ck] = st
        if len(self.latched) > self.capacity:
            self.latched.popitem(last=False)

    def is_flow_end(self, st: FlowState, pkt: RawPacket) -> bool:
        """True on RST or once both sides have sent FIN."""
        if pkt.transport is not Transport.TCP:
            return False
        if pkt.flags & TCP_RST:
            return True
        if pkt.flags & TCP_FIN:
            st.fins |= 1 << st.direction_of(pkt)
        return st.fins == 3


def assign_flow(pkt: RawPacket, table: FlowTable) -> FlowState | None:
    return table.assign(pkt)


def frame_tcp(state: FlowState, pkt: RawPacket) -> list[FramedPacket]:
    """Feed one TCP segment into the flow's framer and return completed frames."""
    return state.frame_tcp(pkt)
