"""ACK-size fingerprint over 10-packet bins.

The session's control-channel ACK size is taken from the first
client-reset / server-reset / ACK / control exchange; the flow then matches
when ACK-size packets cluster in the early bins and vanish afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .flows import Direction, FramedPacket

BIN_SIZE = 10
DEFAULT_SEARCH_BOUND = 16
MIN_EVALUABLE_BINS = 6

_PATTERN = (Direction.C2S, Direction.S2C, Direction.C2S, Direction.C2S)


@dataclass(frozen=True)
class AckThresholds:
    bin1: tuple[int, int] = (1, 3)
    bin2: tuple[int, int] = (2, 5)
    bins3to5_max: int = 5
    bins6plus_max: int = 1

    def __post_init__(self) -> None:
        for lo, hi in (self.bin1, self.bin2):
            if lo > hi:
                raise ValueError(f"empty threshold range [{lo}, {hi}]")
        if self.bins3to5_max < 0 or self.bins6plus_max < 0:
            raise ValueError("bin maxima must be non-negative")


@dataclass
class AckState:
    window: int
    ack_size: int | None = None
    offset: int = 0
    bins: list[int] = field(default_factory=list)
    packets_seen: int = 0

    def __post_init__(self) -> None:
        if not self.bins:
            self.bins = [0] * max(1, self.window // BIN_SIZE)


def detect_ack_candidate(frames: Sequence[FramedPacket], bound: int = DEFAULT_SEARCH_BOUND) -> tuple[int, int] | None:
    """Locate the reset/reset/ACK/control exchange within the first ``bound`` frames.

    Returns ``(ack_size, offset)`` for the smallest matching offset, where the
    third packet (the ACK) must be shorter than the fourth (control).
    """
    head = frames[:bound]
    for o in range(len(head) - 3):
        a, b, c, d = head[o : o + 4]
        if (a.direction, b.direction, c.direction, d.direction) == _PATTERN and c.payload_len < d.payload_len:
            return c.payload_len, o
    return None


def ack_bin_update(state: AckState, frame: FramedPacket) -> AckState:
    """Count one post-offset frame; stops after ``window`` counted frames."""
    if state.ack_size is None or state.packets_seen >= state.window:
        return state
    if frame.payload_len == state.ack_size:
        state.bins[state.packets_seen // BIN_SIZE] += 1
    state.packets_seen += 1
    return state


def ack_evaluate(state: AckState, th: AckThresholds = AckThresholds()) -> bool:
    if state.ack_size is None:
        return False
    return bins_match(state.bins, th)


def bins_match(bins: Sequence[int], th: AckThresholds = AckThresholds()) -> bool:
    """Threshold test on a bin vector (index 0 holds Bin[1])."""
    padded = list(bins) + [0] * max(0, 2 - len(bins))
    if not th.bin1[0] <= padded[0] <= th.bin1[1]:
        return False
    if not th.bin2[0] <= padded[1] <= th.bin2[1]:
        return False
    if any(c > th.bins3to5_max for c in padded[2:5]):
        return False
    return all(c <= th.bins6plus_max for c in padded[5:])


def ack_fingerprint(frames: Sequence[FramedPacket], window: int, *, th: AckThresholds = AckThresholds(),
                    bound: int = DEFAULT_SEARCH_BOUND, min_bins: int = MIN_EVALUABLE_BINS) -> bool:
    """Whole-window ACK verdict for the first ``window`` frames of a flow.

    Frames before the detected offset are tunnel handshake and are not
    counted.  Fewer than ``min_bins`` complete bins means the flow is too
    short to judge, which is a non-match.
    """
    found = detect_ack_candidate(frames, bound)
    if found is None:
        return False
    ack_size, offset = found
    state = AckState(window, ack_size, offset)
    for f in frames[offset:window]:
        ack_bin_update(state, f)
    if state.packets_seen < min_bins * BIN_SIZE:
        return False
    return ack_evaluate(state, th)
