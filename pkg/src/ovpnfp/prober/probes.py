"""Probe payloads and their expected behaviors against an HMAC-protected server."""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass
from enum import Enum


class ProbeName(str, Enum):
    BASE_PROBE_1 = "BaseProbe1"
    BASE_PROBE_2 = "BaseProbe2"
    TCP_GENERIC = "TcpGeneric"
    ONE_ZERO = "OneZero"
    TWO_ZERO = "TwoZero"
    EPMD = "Epmd"
    SSH = "Ssh"
    HTTP_GET = "HttpGet"
    TLS = "Tls"
    TWO_K_RANDOM = "TwoKRandom"
    RST_SEARCH = "RstSearch"


class BehaviorClass(str, Enum):
    EXPLICIT_RESPONSE = "ExplicitResponse"
    SHORT_CLOSE = "ShortClose"
    LONG_CLOSE = "LongClose"
    RST_CLOSE = "RstClose"
    TIMEOUT = "Timeout"
    # Closed between the short and long windows; never matches an expectation.
    INDETERMINATE = "Indeterminate"
    UNREACHABLE = "Unreachable"


class Expect(str, Enum):
    SHORT = "short"
    LONG = "long"
    SHORT_RST = "short_rst"
    RESPONSE = "response"


@dataclass(frozen=True)
class ProbeSpec:
    name: ProbeName
    payload: bytes
    expected: Expect


def _ext(kind: int, body: bytes) -> bytes:
    return struct.pack(">HH", kind, len(body)) + body


def _vec(body: bytes, width: int = 2) -> bytes:
    return len(body).to_bytes(width, "big") + body


_CHROME_SUITES = bytes.fromhex(
    "0a0a130113021303c02bc02fc02cc030cca9cca8c013c014009c009d002f0035"
)


def tls_client_hello(random32: bytes, session_id: bytes, key_share: bytes, server_name: str = "www.example.com") -> bytes:
    """Browser-style TLS 1.3 Client Hello record padded to 517 bytes."""
    host = server_name.encode()
    exts = [
        _ext(0x0A0A, b""),
        _ext(0x0000, _vec(b"\x00" + _vec(host))),
        _ext(0x0017, b""),
        _ext(0xFF01, b"\x00"),
        _ext(0x000A, _vec(bytes.fromhex("2a2a001d00170018"))),
        _ext(0x000B, b"\x01\x00"),
        _ext(0x0023, b""),
        _ext(0x0010, _vec(b"\x02h2\x08http/1.1")),
        _ext(0x0005, b"\x01\x00\x00\x00\x00"),
        _ext(0x000D, _vec(bytes.fromhex("040304030804040105030805050108060601"))),
        _ext(0x0012, b""),
        _ext(0x0033, _vec(bytes.fromhex("2a2a000100") + b"\x00\x1d" + _vec(key_share))),
        _ext(0x002D, b"\x01\x01"),
        _ext(0x002B, _vec(bytes.fromhex("5a5a03040303"), 1)),
        _ext(0x001B, b"\x02\x00\x02"),
    ]
    head = b"\x03\x03" + random32 + _vec(session_id, 1) + _vec(_CHROME_SUITES) + b"\x01\x00"
    unpadded = len(head) + 2 + sum(map(len, exts)) + 4
    pad = max(0, 512 - unpadded - 4)
    exts.append(_ext(0x0015, bytes(pad)))
    body = head + _vec(b"".join(exts))
    hs = b"\x01" + len(body).to_bytes(3, "big") + body
    return b"\x16\x03\x01" + _vec(hs)


SSH_PROBE = b"SSH-2.0-OpenSSH_8.1\r\n"
HTTP_PROBE = b"GET / HTTP/1.0\r\n\r\n"


def build_probes(seed: int = 0) -> dict[ProbeName, ProbeSpec]:
    """The full probe table; random bytes are reproducible from ``seed``."""
    rng = random.Random(seed)
    base1 = b"\x00\x0e\x38" + rng.randbytes(8) + bytes(5)
    two_k = rng.randbytes(2000)
    hello = tls_client_hello(rng.randbytes(32), rng.randbytes(32), rng.randbytes(32))
    table = [
        ProbeSpec(ProbeName.BASE_PROBE_1, base1, Expect.SHORT),
        ProbeSpec(ProbeName.BASE_PROBE_2, base1[:-1], Expect.LONG),
        ProbeSpec(ProbeName.TCP_GENERIC, b"\r\n\r\n", Expect.SHORT),
        ProbeSpec(ProbeName.ONE_ZERO, b"\x00", Expect.LONG),
        ProbeSpec(ProbeName.TWO_ZERO, b"\x00\x00", Expect.SHORT),
        ProbeSpec(ProbeName.EPMD, b"\x00\x01\x6e", Expect.SHORT),
        ProbeSpec(ProbeName.SSH, SSH_PROBE, Expect.SHORT),
        ProbeSpec(ProbeName.HTTP_GET, HTTP_PROBE, Expect.SHORT),
        ProbeSpec(ProbeName.TLS, hello, Expect.SHORT),
        ProbeSpec(ProbeName.TWO_K_RANDOM, two_k, Expect.SHORT_RST),
    ]
    return {p.name: p for p in table}


def rst_payload(size: int, seed: int = 0) -> bytes:
    """Seeded random bytes whose length prefix is always invalid (high bit set)."""
    if size < 1:
        raise ValueError("size must be positive")
    data = bytearray(random.Random(f"rst:{seed}:{size}").randbytes(size))
    data[0] |= 0x80
    return bytes(data)


PORT_SHARE_PROBES = (ProbeName.HTTP_GET, ProbeName.TLS, ProbeName.SSH)
SECONDARY_PROBES = (
    ProbeName.TCP_GENERIC,
    ProbeName.ONE_ZERO,
    ProbeName.TWO_ZERO,
    ProbeName.EPMD,
    ProbeName.TWO_K_RANDOM,
)
