"""Opcode fingerprint: distinct first-byte values over the observation window.

A flow matches when, by the end of the window, between ``min_distinct`` and
``max_distinct`` different header bytes were seen and neither of the two
reset bytes (the first two packets' values) reappeared after the handshake
had produced at least ``min_distinct`` distinct values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

MIN_DISTINCT = 4
MAX_DISTINCT = 10


class OpcodeDecided(Exception):
    """opcode_step was called on a state that already has a verdict."""


@dataclass
class OpcodeState:
    cr: int
    sr: int
    window: int
    oc_set: set[int] = field(default_factory=set)
    index: int = 2
    decided: bool | None = None
    min_distinct: int = MIN_DISTINCT
    max_distinct: int = MAX_DISTINCT


def opcode_init(first: int, second: int, window: int, *, min_distinct: int = MIN_DISTINCT,
                max_distinct: int = MAX_DISTINCT) -> OpcodeState:
    if window < 4:
        raise ValueError(f"observation window must be at least 4, got {window}")
    # Both resets count toward the distinct set: a clean handshake shows
    # reset-client, reset-server, ack, control and data.
    return OpcodeState(first, second, window, {first, second}, 2, None, min_distinct, max_distinct)


def opcode_step(state: OpcodeState, op: int) -> OpcodeState:
    if state.decided is not None:
        raise OpcodeDecided("opcode state already decided")
    if state.index >= state.window:
        raise OpcodeDecided("observation window exhausted")
    if (op == state.cr or op == state.sr) and len(state.oc_set) >= state.min_distinct:
        state.decided = False
        return state
    state.oc_set.add(op)
    state.index += 1
    if state.index == state.window:
        state.decided = state.min_distinct <= len(state.oc_set) <= state.max_distinct
    return state


def opcode_finalize(state: OpcodeState) -> bool:
    if state.decided is not None:
        return state.decided
    # Flow ended before the window filled.
    return False


def opcode_match(opcodes: Iterable[int], window: int, *, min_distinct: int = MIN_DISTINCT,
                 max_distinct: int = MAX_DISTINCT) -> bool:
    """Run the fingerprint over a flow's opcode bytes (only the first ``window`` count)."""
    it = iter(opcodes)
    try:
        first, second = next(it), next(it)
    except StopIteration:
        return False
    st = opcode_init(first, second, window, min_distinct=min_distinct, max_distinct=max_distinct)
    for op in it:
        opcode_step(st, op)
        if st.decided is not None:
            break
    return opcode_finalize(st)
