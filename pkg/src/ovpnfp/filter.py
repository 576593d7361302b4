"""Passive filter: run both fingerprints over each flow's observation window."""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator

from . import ack as ackfp
from . import opcode as opfp
from .flows import (
    DEFAULT_FRAME_SANITY_MAX,
    DEFAULT_REASSEMBLY_CAP,
    DEFAULT_TABLE_CAPACITY,
    DEFAULT_WINDOW,
    FRAMING_MODES,
    Direction,
    FlowState,
    FlowTable,
    FramedPacket,
    Overflow,
    Status,
    apply_loss,
    frame_udp,
)
from .pcap import RawPacket, Transport, open_capture

log = logging.getLogger(__name__)

TIME_BUCKET = 300


class MatchedBy(str, Enum):
    OPCODE = "opcode"
    ACK = "ack"
    BOTH = "both"


@dataclass
class FilterConfig:
    window: int = DEFAULT_WINDOW
    sample_rate: float = 1.0
    loss: float = 0.0
    seed: int = 0
    opcode_min: int = opfp.MIN_DISTINCT
    opcode_max: int = opfp.MAX_DISTINCT
    ack_thresholds: ackfp.AckThresholds = field(default_factory=ackfp.AckThresholds)
    ack_search_bound: int = ackfp.DEFAULT_SEARCH_BOUND
    ack_min_bins: int = ackfp.MIN_EVALUABLE_BINS
    reassembly_cap: int = DEFAULT_REASSEMBLY_CAP
    frame_sanity_max: int = DEFAULT_FRAME_SANITY_MAX
    table_capacity: int = DEFAULT_TABLE_CAPACITY
    framing: str = "auto"

    def validate(self) -> None:
        if not 4 <= self.window:
            raise ValueError("window must be at least 4")
        if not 0 < self.sample_rate <= 1:
            raise ValueError("sample rate must be in (0, 1]")
        if not 0 <= self.loss <= 1:
            raise ValueError("loss must be in [0, 1]")
        if not 1 <= self.opcode_min <= self.opcode_max <= 256:
            raise ValueError("need 1 <= opcode_min <= opcode_max <= 256")
        if self.ack_search_bound < 4:
            raise ValueError("ack search bound must be at least 4")
        if self.reassembly_cap < 0 or self.frame_sanity_max < 1 or self.table_capacity < 1:
            raise ValueError("buffer caps must be positive")
        if self.framing not in FRAMING_MODES:
            raise ValueError(f"framing must be one of {FRAMING_MODES}")


@dataclass(frozen=True)
class SuspectRecord:
    time_bucket: int
    server_addr: str
    server_port: int
    transport: str
    matched_by: MatchedBy
    frames_at_decision: int

    def to_json(self, **extra) -> str:
        d = {
            "time_bucket": self.time_bucket,
            "server_addr": self.server_addr,
            "server_port": self.server_port,
            "transport": self.transport,
            "matched_by": self.matched_by.value,
            "frames_at_decision": self.frames_at_decision,
        }
        d.update(extra)
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "SuspectRecord":
        d = json.loads(line)
        return cls(d["time_bucket"], d["server_addr"], int(d["server_port"]), d["transport"],
                   MatchedBy(d["matched_by"]), int(d["frames_at_decision"]))


@dataclass
class FilterStats:
    flows_seen: int = 0
    flows_at_window: int = 0
    flagged: int = 0
    cleared: int = 0
    dropped: int = 0
    evicted: int = 0
    packets: int = 0

    def summary(self) -> str:
        return (f"flows seen={self.flows_seen} flows>=window={self.flows_at_window} "
                f"flagged={self.flagged} dropped={self.dropped} evicted={self.evicted}")


def evaluate_window(frames: list[FramedPacket], cfg: FilterConfig) -> MatchedBy | None:
    """Fingerprint verdict for a flow's buffered frames (pure function of the window)."""
    by_opcode = opfp.opcode_match(
        (f.opcode_byte for f in frames), cfg.window, min_distinct=cfg.opcode_min, max_distinct=cfg.opcode_max
    )
    by_ack = ackfp.ack_fingerprint(
        frames, cfg.window, th=cfg.ack_thresholds, bound=cfg.ack_search_bound, min_bins=cfg.ack_min_bins
    )
    if by_opcode and by_ack:
        return MatchedBy.BOTH
    if by_opcode:
        return MatchedBy.OPCODE
    if by_ack:
        return MatchedBy.ACK
    return None


class FlowFilter:
    """Stateful filter over a packet stream.

    Feed packets with :meth:`process_packet`, then call :meth:`finish` at the
    end of the capture to decide flows that ended inside their window.
    """

    def __init__(self, cfg: FilterConfig | None = None) -> None:
        self.cfg = cfg or FilterConfig()
        self.cfg.validate()
        self.table = FlowTable(
            self.cfg.table_capacity,
            self.cfg.window,
            reassembly_cap=self.cfg.reassembly_cap,
            frame_sanity_max=self.cfg.frame_sanity_max,
            sample_rate=self.cfg.sample_rate,
            seed=self.cfg.seed,
            framing=self.cfg.framing,
        )
        self.stats = FilterStats()

    def process_packet(self, pkt: RawPacket) -> SuspectRecord | None:
        self.stats.packets += 1
        st = self.table.assign(pkt)
        if st is None or st.status is not Status.OBSERVING:
            return None
        direction = Direction.C2S if (pkt.src == st.client[0] and pkt.sport == st.client[1]) else Direction.S2C
        if pkt.transport is Transport.TCP:
            if pkt.payload:
                try:
                    frames = st.framers[direction].feed(direction, pkt.seq, pkt.payload, pkt.ts_ns)
                except Overflow:
                    self.stats.dropped += 1
                    self.table.settle(st, Status.DROPPED)
                    return None
                for f in frames:
                    rec = self.process_flow(st, f)
                    if st.status is not Status.OBSERVING:
                        return rec
            if self.table.is_flow_end(st, pkt):
                return self.end_flow(st)
            return None
        frame = frame_udp(direction, pkt.payload, pkt.ts_ns)
        return None if frame is None else self.process_flow(st, frame)

    def process_flow(self, st: FlowState, frame: FramedPacket) -> SuspectRecord | None:
        """Buffer one frame; decide the flow when its window fills."""
        if not st.append(frame):
            return None
        st.last_ts_ns = frame.ts_ns
        if st.framed_count >= self.cfg.window:
            self.stats.flows_at_window += 1
            return self._decide(st)
        return None

    def end_flow(self, st: FlowState) -> SuspectRecord | None:
        if st.status is not Status.OBSERVING:
            return None
        return self._decide(st)

    def _decide(self, st: FlowState) -> SuspectRecord | None:
        matched = evaluate_window(st.frames, self.cfg)
        n = st.framed_count
        if matched is None:
            self.stats.cleared += 1
            self.table.settle(st, Status.CLEARED)
            return None
        self.stats.flagged += 1
        ts = st.last_ts_ns // 1_000_000_000
        rec = SuspectRecord(ts - ts % TIME_BUCKET, st.key.server_addr, st.key.server_port,
                            st.key.transport.value, matched, n)
        self.table.settle(st, Status.FLAGGED)
        return rec

    def finish(self) -> list[SuspectRecord]:
        out = []
        for st in list(self.table.active.values()):
            rec = self.end_flow(st)
            if rec is not None:
                out.append(rec)
        self.stats.flows_seen = self.table.created
        self.stats.evicted = self.table.evictions
        return out

    def run(self, packets: Iterable[RawPacket]) -> Iterator[SuspectRecord]:
        for pkt in packets:
            rec = self.process_packet(pkt)
            if rec is not None:
                yield rec
        yield from self.finish()


def run_filter(path: str | os.PathLike, cfg: FilterConfig | None = None) -> tuple[list[SuspectRecord], FilterStats]:
    cfg = cfg or FilterConfig()
    flt = FlowFilter(cfg)
    packets = apply_loss(open_capture(path), cfg.loss, cfg.seed)
    records = list(flt.run(packets))
    return records, flt.stats


_log_lock = threading.Lock()


def write_suspect_log(records: Iterable[SuspectRecord], path: str | os.PathLike, **extra) -> int:
    """Append records as JSON lines; returns the number written.

    Each line goes out in a single ``write`` on an append-mode descriptor so a
    failure never leaves a partial line behind from this process.
    """
    n = 0
    fd = os.open(os.fspath(path), os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
    try:
        for rec in records:
            line = (rec.to_json(**extra) + "\n").encode()
            with _log_lock:
                written = os.write(fd, line)
            if written != len(line):
                raise OSError(f"short write to {path}")
            n += 1
    finally:
        os.close(fd)
    return n


def read_suspect_log(path: str | os.PathLike) -> list[SuspectRecord]:
    with open(path) as f:
        return [SuspectRecord.from_json(line) for line in f if line.strip()]
