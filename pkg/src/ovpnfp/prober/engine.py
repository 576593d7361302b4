"""Staged active probing of suspected endpoints."""

from __future__ import annotations

import errno
import ipaddress
import json
import logging
import socket
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Iterator, Sequence

from .. import protocol
from .probes import (
    PORT_SHARE_PROBES,
    SECONDARY_PROBES,
    BehaviorClass,
    Expect,
    ProbeName,
    ProbeSpec,
    build_probes,
    rst_payload,
)

log = logging.getLogger(__name__)

RESPONSE_PREFIX = 64
RST_SEARCH_MAX = 8192


class CloseKind(str, Enum):
    FIN = "Fin"
    RST = "Rst"
    NONE = "None"


class Verdict(str, Enum):
    OPENVPN = "OpenVPN"
    OPENVPN_NO_HMAC = "OpenVPNNoHmac"
    PORT_SHARED = "PortShared"
    NOT_OPENVPN = "NotOpenVPN"
    UNREACHABLE = "Unreachable"


class Interim(str, Enum):
    CONTINUE = "Continue"
    OPENVPN_NO_HMAC = "OpenVPNNoHmac"
    NOT_OPENVPN = "NotOpenVPN"
    UNREACHABLE = "Unreachable"


@dataclass(frozen=True)
class ProbeConfig:
    t_short: float = 3.0
    t_long_min: float = 30.0
    deadline: float = 75.0
    connect_timeout: float = 5.0
    seed: int = 0
    min_matches: int = len(SECONDARY_PROBES)
    rst_search: bool = False
    # How long to keep collecting bytes after the first response byte.
    response_grace: float = 0.2

    def __post_init__(self) -> None:
        if not 0 < self.t_short < self.t_long_min <= self.deadline:
            raise ValueError("need 0 < t_short < t_long_min <= deadline")
        if self.connect_timeout <= 0:
            raise ValueError("connect_timeout must be positive")
        if not 0 <= self.min_matches <= len(SECONDARY_PROBES):
            raise ValueError(f"min_matches must be in [0, {len(SECONDARY_PROBES)}]")


@dataclass(frozen=True)
class Endpoint:
    addr: str
    port: int

    def __str__(self) -> str:
        host = f"[{self.addr}]" if ":" in self.addr else self.addr
        return f"tcp://{host}:{self.port}"

    @classmethod
    def parse(cls, text: str) -> "Endpoint":
        """Parse ``tcp://1.2.3.4:1194``, ``[::1]:443`` or ``host:port``."""
        t = text.strip()
        if "://" in t:
            scheme, t = t.split("://", 1)
            if scheme != "tcp":
                raise ValueError(f"only tcp:// targets can be probed: {text!r}")
        if t.startswith("["):
            host, _, port = t[1:].partition("]:")
        else:
            host, _, port = t.rpartition(":")
        if not host or not port:
            raise ValueError(f"bad endpoint {text!r}")
        return cls(host, int(port))


@dataclass
class ProbeObservation:
    name: ProbeName
    elapsed: float
    response_prefix: bytes
    close_kind: CloseKind
    behavior: BehaviorClass
    size: int = 0

    def to_dict(self) -> dict:
        return {
            "probe": self.name.value,
            "size": self.size,
            "elapsed": round(self.elapsed, 3),
            "response_prefix": self.response_prefix.hex(),
            "close_kind": self.close_kind.value,
            "class": self.behavior.value,
        }


@dataclass
class RstThreshold:
    """Outcome of the RST search: an exact size or a sentinel."""

    value: int | None
    sentinel: str | None
    connections: int
    bounds: tuple[int, int] = (0, 0)

    def label(self) -> str:
        return self.sentinel if self.value is None else str(self.value)


@dataclass
class EndpointVerdict:
    endpoint: Endpoint
    verdict: Verdict
    evidence: list[ProbeObservation] = field(default_factory=list)
    rst_threshold: RstThreshold | None = None
    connections: int = 0
    matches: int = 0

    def to_json(self, **extra) -> str:
        d = {
            "endpoint": str(self.endpoint),
            "addr": self.endpoint.addr,
            "port": self.endpoint.port,
            "verdict": self.verdict.value,
            "rst_threshold": None if self.rst_threshold is None else self.rst_threshold.label(),
            "connections": self.connections,
            "secondary_matches": self.matches,
            "observations": [o.to_dict() for o in self.evidence],
        }
        d.update(extra)
        return json.dumps(d)


# --- single probe ---------------------------------------------------------------------


def classify(elapsed: float, got_data: bool, close: CloseKind, cfg: ProbeConfig) -> BehaviorClass:
    if got_data:
        return BehaviorClass.EXPLICIT_RESPONSE
    if close is CloseKind.RST:
        return BehaviorClass.RST_CLOSE
    if close is CloseKind.NONE:
        return BehaviorClass.TIMEOUT
    if elapsed <= cfg.t_short:
        return BehaviorClass.SHORT_CLOSE
    if cfg.t_long_min <= elapsed <= cfg.deadline:
        return BehaviorClass.LONG_CLOSE
    return BehaviorClass.INDETERMINATE


def matches(obs: ProbeObservation, expected: Expect, cfg: ProbeConfig) -> bool:
    b = obs.behavior
    if expected is Expect.SHORT:
        return b is BehaviorClass.SHORT_CLOSE or (b is BehaviorClass.RST_CLOSE and obs.elapsed <= cfg.t_short)
    if expected is Expect.LONG:
        return b in (BehaviorClass.LONG_CLOSE, BehaviorClass.TIMEOUT) or (
            b is BehaviorClass.RST_CLOSE and obs.elapsed >= cfg.t_long_min
        )
    if expected is Expect.SHORT_RST:
        return b is BehaviorClass.RST_CLOSE and obs.elapsed <= cfg.t_short
    return b is BehaviorClass.EXPLICIT_RESPONSE


def _unreachable(name: ProbeName, size: int) -> ProbeObservation:
    return ProbeObservation(name, 0.0, b"", CloseKind.NONE, BehaviorClass.UNREACHABLE, size)


def run_probe(endpoint: Endpoint, spec: ProbeSpec, cfg: ProbeConfig) -> ProbeObservation:
    """Connect, send the payload, and watch for a response or a close."""
    size = len(spec.payload)
    try:
        sock = socket.create_connection((endpoint.addr, endpoint.port), timeout=cfg.connect_timeout)
    except OSError:
        return _unreachable(spec.name, size)
    response = bytearray()
    close = CloseKind.NONE
    elapsed = None
    try:
        start = time.monotonic()
        try:
            sock.sendall(spec.payload)
        except ConnectionResetError:
            close = CloseKind.RST
        except OSError as exc:
            if exc.errno != errno.EPIPE:
                raise
            close = CloseKind.FIN
        if close is CloseKind.NONE:
            close, elapsed = _watch(sock, start, response, cfg)
        if elapsed is None:
            elapsed = time.monotonic() - start
    finally:
        sock.close()
    behavior = classify(elapsed, bool(response), close, cfg)
    return ProbeObservation(spec.name, elapsed, bytes(response[:RESPONSE_PREFIX]), close, behavior, size)


def _watch(sock: socket.socket, start: float, response: bytearray, cfg: ProbeConfig) -> tuple[CloseKind, float | None]:
    end = start + cfg.deadline
    first_event = None
    while True:
        now = time.monotonic()
        if now >= end:
            return CloseKind.NONE, first_event
        sock.settimeout(end - now)
        try:
            data = sock.recv(4096)
        except socket.timeout:
            return CloseKind.NONE, first_event
        except ConnectionResetError:
            return CloseKind.RST, first_event
        now = time.monotonic()
        if first_event is None:
            first_event = now - start
        if not data:
            return CloseKind.FIN, first_event
        response += data
        if len(response) >= RESPONSE_PREFIX:
            return CloseKind.NONE, first_event
        # Keep listening briefly for the rest of the first response.
        end = min(end, now + cfg.response_grace)


# --- stages ------------------------------------------------------------------------------


def is_server_reset_frame(data: bytes) -> bool:
    """True for a length-prefixed frame whose opcode is a server reset."""
    if len(data) < 3:
        return False
    length = int.from_bytes(data[:2], "big")
    if not 1 <= length <= 0xFFFF:
        return False
    return protocol.opcode_of(data[2]) in protocol.SERVER_RESET_OPCODES


class Session:
    """Sequential probes to one endpoint with a connection counter."""

    def __init__(self, endpoint: Endpoint, cfg: ProbeConfig, dial: Endpoint | None = None) -> None:
        self.endpoint = endpoint
        # Where to actually connect; differs from the endpoint when a fleet maps it locally.
        self.dial = dial or endpoint
        self.cfg = cfg
        self.probes = build_probes(cfg.seed)
        self.connections = 0
        self.evidence: list[ProbeObservation] = []

    def run(self, name: ProbeName) -> ProbeObservation:
        obs = run_probe(self.dial, self.probes[name], self.cfg)
        self.connections += 1
        self.evidence.append(obs)
        return obs

    def run_payload(self, name: ProbeName, payload: bytes) -> ProbeObservation:
        obs = run_probe(self.dial, ProbeSpec(name, payload, Expect.SHORT), self.cfg)
        self.connections += 1
        return obs


def interim_verdict(obs1: ProbeObservation, obs2: ProbeObservation | None) -> Interim:
    if obs1.behavior is BehaviorClass.UNREACHABLE or (obs2 is not None and obs2.behavior is BehaviorClass.UNREACHABLE):
        return Interim.UNREACHABLE
    if obs1.behavior is BehaviorClass.EXPLICIT_RESPONSE and is_server_reset_frame(obs1.response_prefix):
        return Interim.OPENVPN_NO_HMAC
    if obs1.behavior is BehaviorClass.SHORT_CLOSE and obs2 is not None and obs2.behavior in (
        BehaviorClass.LONG_CLOSE,
        BehaviorClass.TIMEOUT,
    ):
        return Interim.CONTINUE
    return Interim.NOT_OPENVPN


def base_probe_pair(session: Session) -> tuple[ProbeObservation, ProbeObservation | None, Interim]:
    obs1 = session.run(ProbeName.BASE_PROBE_1)
    if obs1.behavior is BehaviorClass.UNREACHABLE:
        return obs1, None, Interim.UNREACHABLE
    interim = interim_verdict(obs1, None)
    if interim is Interim.OPENVPN_NO_HMAC:
        return obs1, None, interim
    obs2 = session.run(ProbeName.BASE_PROBE_2)
    return obs1, obs2, interim_verdict(obs1, obs2)


def port_share_screen(session: Session) -> bool:
    """True (port shared) as soon as one of the HTTP/TLS/SSH probes is answered."""
    for name in PORT_SHARE_PROBES:
        if session.run(name).behavior is BehaviorClass.EXPLICIT_RESPONSE:
            return True
    return False


def secondary_probes(session: Session) -> list[ProbeObservation]:
    return [session.run(name) for name in SECONDARY_PROBES]


def count_matches(observations: Sequence[ProbeObservation], probes: dict, cfg: ProbeConfig) -> int:
    return sum(matches(o, probes[o.name].expected, cfg) for o in observations)


def rst_threshold_search(endpoint: Endpoint, cfg: ProbeConfig, *, session: Session | None = None,
                         high: int = RST_SEARCH_MAX) -> RstThreshold:
    """Binary search for the smallest payload size whose close is a RST.

    Uses at most 1 + ceil(log2(high)) connections (14 for 8192).
    """
    session = session or Session(endpoint, cfg)
    before = session.connections

    def is_rst(size: int) -> bool | None:
        obs = session.run_payload(ProbeName.RST_SEARCH, rst_payload(size, cfg.seed))
        if obs.behavior is BehaviorClass.UNREACHABLE:
            return None
        return obs.close_kind is CloseKind.RST

    top = is_rst(high)
    if top is None:
        return RstThreshold(None, "unreachable", session.connections - before, (0, high))
    if not top:
        return RstThreshold(None, f">{high}", session.connections - before, (high, high + 1))
    lo, hi = 0, high  # lo closes with FIN (vacuously for 0), hi with RST
    while hi - lo > 1:
        mid = (lo + hi) // 2
        r = is_rst(mid)
        if r is None:
            return RstThreshold(None, "unreachable", session.connections - before, (lo, hi))
        if r:
            hi = mid
        else:
            lo = mid
    if hi == 1:
        return RstThreshold(None, "<1", session.connections - before, (0, 1))
    return RstThreshold(hi, None, session.connections - before, (lo, hi))


def synthesize_verdict(interim: Interim, port_shared: bool | None, secondary: Sequence[ProbeObservation],
                       probes: dict, cfg: ProbeConfig) -> tuple[Verdict, int]:
    if interim is Interim.UNREACHABLE:
        return Verdict.UNREACHABLE, 0
    if interim is Interim.OPENVPN_NO_HMAC:
        return Verdict.OPENVPN_NO_HMAC, 0
    if interim is Interim.NOT_OPENVPN:
        return Verdict.NOT_OPENVPN, 0
    if port_shared:
        return Verdict.PORT_SHARED, 0
    n = count_matches(secondary, probes, cfg)
    ok = len(secondary) == len(SECONDARY_PROBES) and n >= cfg.min_matches
    return (Verdict.OPENVPN if ok else Verdict.NOT_OPENVPN), n


def probe_endpoint(endpoint: Endpoint, cfg: ProbeConfig, dial: Endpoint | None = None) -> EndpointVerdict:
    """Run every stage against one endpoint, strictly in order."""
    session = Session(endpoint, cfg, dial)
    _, _, interim = base_probe_pair(session)
    shared = None
    secondary: list[ProbeObservation] = []
    if interim is Interim.CONTINUE:
        shared = port_share_screen(session)
        if not shared:
            secondary = secondary_probes(session)
    verdict, n = synthesize_verdict(interim, shared, secondary, session.probes, cfg)
    rst = None
    if cfg.rst_search and verdict is not Verdict.UNREACHABLE:
        rst = rst_threshold_search(session.dial, cfg)
    log.info("%s -> %s after %d connections", endpoint, verdict.value, session.connections)
    return EndpointVerdict(endpoint, verdict, session.evidence, rst, session.connections, n)


def probe_endpoints(endpoints: Iterable[Endpoint], cfg: ProbeConfig, *, workers: int = 16,
                    resolve: Callable[[Endpoint], Endpoint | None] | None = None) -> list[EndpointVerdict]:
    """Probe endpoints concurrently; results keep the input order.

    ``resolve`` maps a logical endpoint to the address actually dialed.
    """
    eps = list(endpoints)
    if not eps:
        return []

    def one(ep: Endpoint) -> EndpointVerdict:
        return probe_endpoint(ep, cfg, resolve(ep) if resolve else None)

    with ThreadPoolExecutor(max_workers=max(1, min(workers, len(eps)))) as pool:
        return list(pool.map(one, eps))


def expand_subnet(endpoint: Endpoint, ports: Iterable[int] = (), prefix: int | None = None) -> list[Endpoint]:
    """The enclosing /29 (/125 for IPv6) crossed with ports, original endpoint first."""
    addr = ipaddress.ip_address(endpoint.addr)
    if prefix is None:
        prefix = 29 if addr.version == 4 else 125
    net = ipaddress.ip_network(f"{addr}/{prefix}", strict=False)
    port_list = [endpoint.port]
    for p in (1194, *ports):
        if p not in port_list:
            port_list.append(p)
    hosts = [addr] + [h for h in net if h != addr]
    out = [Endpoint(str(h), p) for h in hosts for p in port_list]
    return out


def iter_probe_endpoints(endpoints: Sequence[Endpoint], cfg: ProbeConfig, *, workers: int = 16,
                         resolve: Callable[[Endpoint], Endpoint | None] | None = None,
                         ) -> Iterator[tuple[int, EndpointVerdict]]:
    """Yield ``(index, verdict)`` as each endpoint finishes."""
    if not endpoints:
        return
    pool = ThreadPoolExecutor(max_workers=max(1, min(workers, len(endpoints))))
    try:
        futures = {pool.submit(probe_endpoint, ep, cfg, resolve(ep) if resolve else None): i
                   for i, ep in enumerate(endpoints)}
        for fut in as_completed(futures):
            yield futures[fut], fut.result()
    finally:
        pool.shutdown(wait=False, cancel_futures=True)
