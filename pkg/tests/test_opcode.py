import random

import pytest
from hypothesis import given, strategies as st

from ovpnfp.opcode import OpcodeDecided, opcode_finalize, opcode_init, opcode_match, opcode_step

CR, SR, ACK, CTRL, DATA = 0x38, 0x40, 0x28, 0x20, 0x48


def run(seq, n):
    state = opcode_init(seq[0], seq[1], n)
    for op in seq[2:n]:
        opcode_step(state, op)
        if state.decided is not None:
            break
    return state


def vanilla(n=100, seed=0):
    rng = random.Random(seed)
    body = [ACK, CTRL, DATA] + [rng.choice([ACK, CTRL, DATA]) for _ in range(n - 5)]
    return [CR, SR] + body


def test_init():
    s = opcode_init(CR, SR, 100)
    assert (s.cr, s.sr, len(s.oc_set), s.index) == (CR, SR, 2, 2)
    assert len(opcode_init(0xAA, 0xAA, 100).oc_set) == 1
    with pytest.raises(ValueError):
        opcode_init(CR, SR, 3)


def test_vanilla_sequence_matches():
    s = run(vanilla(), 100)
    assert s.decided is True and len(s.oc_set) == 5


def test_reset_recurrence_after_four_distinct_fails():
    seq = vanilla()
    seq[50] = CR
    assert run(seq, 100).decided is False


def test_tls_like_stream_has_too_few_distinct():
    s = run([0x17] * 100, 100)
    assert s.decided is False
    assert len(s.oc_set) < 4


def test_twenty_distinct_bytes_fail():
    seq = [CR, SR] + [(0x50 + i % 20) for i in range(98)]
    assert run(seq, 100).decided is False


def test_finalize():
    s = opcode_init(CR, SR, 100)
    for op in vanilla()[2:40]:
        opcode_step(s, op)
    assert opcode_finalize(s) is False
    assert opcode_finalize(run(vanilla(), 100)) is True
    seq = [CR, SR, 1, 2, 3, 4, 5] + [1] * 93
    s = run(seq, 100)
    assert len(s.oc_set) == 7 and opcode_finalize(s) is True


def test_step_after_decision_rejected():
    s = run(vanilla(), 100)
    with pytest.raises(OpcodeDecided):
        opcode_step(s, ACK)


def test_early_reset_repeat_tolerated():
    # Retransmitted reset before four distinct values are seen is absorbed.
    seq = [CR, SR, CR, SR, ACK, CTRL] + [DATA] * 94
    assert opcode_match(seq, 100) is True


@given(st.lists(st.integers(0, 255), min_size=100, max_size=150))
def test_prefix_determinism(seq):
    assert opcode_match(seq, 100) == opcode_match(seq[:100], 100)


@given(st.lists(st.sampled_from([1, 2, 3]), min_size=100, max_size=100))
def test_fewer_than_four_distinct_never_flag(seq):
    assert opcode_match(seq, 100) is False


@given(st.lists(st.integers(0, 255), min_size=10, max_size=100), st.permutations(range(256)))
def test_bijection_invariance(seq, perm):
    assert opcode_match(seq, len(seq)) == opcode_match([perm[b] for b in seq], len(seq))
