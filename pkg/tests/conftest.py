import socket
from pathlib import Path

import pytest

from ovpnfp.emulator.pcapgen import session_endpoints, trace_frames, write_sessions, Session
from ovpnfp.flows import Direction, FramedPacket
from ovpnfp.pcap import decode

C, S = Direction.C2S, Direction.S2C


def frames_of(spec):
    """FramedPacket list from (direction, size[, opcode]) tuples."""
    out = []
    for item in spec:
        d, n, *op = item
        out.append(FramedPacket(d, n, op[0] if op else 0))
    return out


def packets_of(trace, index=0, port=1194):
    """Decoded RawPackets of one rendered session."""
    client, server = session_endpoints(index, port)
    return [decode(1, frame, ts) for ts, frame in trace_frames(trace, client, server, seed=index)]


def write_corpus(path: Path, traces, port=1194) -> Path:
    sessions = []
    for i, tr in enumerate(traces):
        client, server = session_endpoints(i, port)
        sessions.append(Session(tr, client, server, seed=i))
    write_sessions(path, sessions)
    return path


def closed_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def tmp_pcap(tmp_path):
    return tmp_path / "capture.pcap"


# One summary line per acceptance criterion, printed after the run.
_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed and not detail:
        detail = str(rep.longrepr).splitlines()[-1][:160]
    _CRITERIA[mark.args[0]] = ("PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
