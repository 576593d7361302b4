"""Live mock servers: OpenVPN TCP/UDP state machines and non-VPN personas.

Each accepted connection runs in its own thread.  Closing follows kernel
semantics: unread bytes beyond the read buffer turn the close into a RST.
"""

from __future__ import annotations

import logging
import random
import select
import socket
import struct
import threading
import time
from enum import Enum

from .. import protocol
from ..pcap import Transport
from .config import EmulatorConfig, Persona

log = logging.getLogger(__name__)


class CloseKind(str, Enum):
    FIN = "fin"
    RST = "rst"
    NONE = "none"


def close_kind_for(received: int, read_buffer: int) -> CloseKind:
    """RST iff the application left bytes unread (received beyond its buffer)."""
    consumed = min(received, read_buffer)
    return CloseKind.RST if received > consumed else CloseKind.FIN


class Conn:
    """Accepted socket plus a running count of received bytes."""

    def __init__(self, sock: socket.socket, cfg: EmulatorConfig) -> None:
        self.sock = sock
        self.cfg = cfg
        self.received = 0
        self.started = time.monotonic()
        self.peer_closed = False

    def recv(self, deadline: float | None, n: int = 65536) -> bytes | None:
        """Next chunk, ``b""`` on peer close, None when ``deadline`` passes."""
        while True:
            timeout = None if deadline is None else deadline - time.monotonic()
            if timeout is not None and timeout <= 0:
                return None
            r, _, _ = select.select([self.sock], [], [], timeout)
            if not r:
                continue
            try:
                data = self.sock.recv(n)
            except (ConnectionResetError, OSError):
                data = b""
            if not data:
                self.peer_closed = True
            self.received += len(data)
            return data

    def send(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except OSError:
            pass


def close_with_semantics(conn: Conn) -> CloseKind:
    """Drain in-flight bytes, then close with FIN or RST by byte count."""
    end = time.monotonic() + conn.cfg.settle
    while not conn.peer_closed:
        chunk = conn.recv(end)
        if not chunk:
            break
    kind = close_kind_for(conn.received, conn.cfg.read_buffer)
    try:
        if kind is CloseKind.RST:
            conn.sock.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
        conn.sock.close()
    except OSError:
        pass
    return kind


# --- persona handlers --------------------------------------------------------------


def _read_exact(conn: Conn, buf: bytearray, n: int, deadline: float) -> bool:
    while len(buf) < n:
        chunk = conn.recv(deadline)
        if not chunk:
            return False
        buf += chunk
    return True


def handle_openvpn(conn: Conn, rng: random.Random, *, first: bytes = b"") -> CloseKind:
    """Length-prefixed packet loop with tls-auth silence and hand_window timeout."""
    cfg = conn.cfg
    deadline = conn.started + cfg.hand_window
    buf = bytearray(first)
    session = rng.randbytes(8)
    while True:
        if not _read_exact(conn, buf, 2, deadline):
            return close_with_semantics(conn)
        (length,) = struct.unpack(">H", buf[:2])
        if length == 0 or length > cfg.max_len:
            return close_with_semantics(conn)
        if not _read_exact(conn, buf, 2 + length, deadline):
            return close_with_semantics(conn)
        frame = bytes(buf[2 : 2 + length])
        del buf[: 2 + length]
        if cfg.tls_auth:
            # HMAC never validates for an unauthenticated peer.
            return close_with_semantics(conn)
        if protocol.opcode_of(frame[0]) in protocol.CLIENT_RESET_OPCODES:
            peer = frame[1:9] if len(frame) >= 9 else bytes(8)
            conn.send(protocol.tcp_frame(protocol.server_reset(session, peer)))


def handle_portshared(conn: Conn, rng: random.Random) -> CloseKind:
    """OpenVPN unless the first length prefix is invalid; then hand off to the backend."""
    cfg = conn.cfg
    buf = bytearray()
    if not _read_exact(conn, buf, 2, conn.started + cfg.hand_window):
        return close_with_semantics(conn)
    (length,) = struct.unpack(">H", buf[:2])
    if length == 0 or length > cfg.max_len:
        return HANDLERS[cfg.backend](conn, rng, first=bytes(buf))
    return handle_openvpn(conn, rng, first=bytes(buf))


def _first_chunk(conn: Conn, first: bytes) -> bytes | None:
    if first:
        return first
    chunk = conn.recv(conn.started + conn.cfg.hand_window)
    return chunk or None


def handle_http(conn: Conn, rng: random.Random, *, first: bytes = b"") -> CloseKind:
    data = bytearray(first)
    deadline = conn.started + conn.cfg.hand_window
    while b"\r\n\r\n" not in data:
        if data and not data[:1].isalpha():
            break
        chunk = conn.recv(deadline)
        if not chunk:
            return close_with_semantics(conn)
        data += chunk
    if data.startswith((b"GET ", b"HEAD ", b"POST ")) and b"\r\n\r\n" in data:
        body = b"<html><body>It works!</body></html>\n"
        conn.send(b"HTTP/1.0 200 OK\r\nServer: Apache\r\nContent-Type: text/html\r\nContent-Length: "
                  + str(len(body)).encode() + b"\r\n\r\n" + body)
    else:
        body = b"<html><body>Bad Request</body></html>\n"
        conn.send(b"HTTP/1.0 400 Bad Request\r\nServer: Apache\r\nContent-Length: "
                  + str(len(body)).encode() + b"\r\nConnection: close\r\n\r\n" + body)
    return close_with_semantics(conn)


def server_hello(rng: random.Random) -> bytes:
    body = b"\x03\x03" + rng.randbytes(32) + b"\x20" + rng.randbytes(32) + b"\x13\x01\x00" + b"\x00\x2e"
    body += b"\x00\x2b\x00\x02\x03\x04" + b"\x00\x33\x00\x24\x00\x1d\x00\x20" + rng.randbytes(32)
    hs = b"\x02" + len(body).to_bytes(3, "big") + body
    return b"\x16\x03\x03" + len(hs).to_bytes(2, "big") + hs


TLS_ALERT_DECODE_ERROR = bytes.fromhex("150303000202" "32")


def handle_tls(conn: Conn, rng: random.Random, *, first: bytes = b"") -> CloseKind:
    chunk = _first_chunk(conn, first)
    if chunk is None:
        return close_with_semantics(conn)
    conn.send(server_hello(rng) if chunk[0] == 0x16 else TLS_ALERT_DECODE_ERROR)
    return close_with_semantics(conn)


SSH_BANNER = b"SSH-2.0-OpenSSH_8.9p1 Ubuntu-3ubuntu0.1\r\n"


def handle_ssh(conn: Conn, rng: random.Random, *, first: bytes = b"") -> CloseKind:
    if not first:
        conn.send(SSH_BANNER)
    chunk = _first_chunk(conn, first)
    if chunk is None:
        return close_with_semantics(conn)
    if first:
        conn.send(SSH_BANNER)
    if not chunk.startswith(b"SSH-"):
        conn.send(b"Invalid SSH identification string.\r\n")
    return close_with_semantics(conn)


def handle_echo(conn: Conn, rng: random.Random, *, first: bytes = b"") -> CloseKind:
    if first:
        conn.send(first)
    deadline = conn.started + conn.cfg.hand_window
    while True:
        chunk = conn.recv(deadline)
        if not chunk:
            return close_with_semantics(conn)
        conn.send(chunk)


def handle_obfs4like(conn: Conn, rng: random.Random, *, delay: float = 0.0) -> CloseKind:
    """Silent reader that closes after a server-specific delay."""
    deadline = conn.started + delay
    while True:
        chunk = conn.recv(deadline)
        if chunk is None or not chunk:
            break
    kind = close_kind_for(conn.received, conn.cfg.read_buffer)
    try:
        if kind is CloseKind.RST:
            conn.sock.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
        conn.sock.close()
    except OSError:
        pass
    return kind


HANDLERS = {
    Persona.HTTP: handle_http,
    Persona.TLS: handle_tls,
    Persona.SSH: handle_ssh,
    Persona.ECHO: handle_echo,
}


# --- listeners -----------------------------------------------------------------------


class EmulatorServer:
    """Threaded listener for one persona.  Use as a context manager."""

    def __init__(self, cfg: EmulatorConfig, host: str = "127.0.0.1", port: int = 0) -> None:
        cfg.validate()
        if cfg.persona is Persona.RANDOM:
            raise ValueError("the random persona exists only for trace generation")
        self.cfg = cfg
        self.host = host
        self.port = port
        self._rng = random.Random(cfg.seed)
        lo, hi = cfg.obfs4_delay
        # One delay per listener, so every connection to it behaves alike.
        self.obfs4_delay = self._rng.uniform(lo, hi)
        self._sock: socket.socket | None = None
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()
        self._lock = threading.Lock()
        self.closes: list[CloseKind] = []

    @property
    def address(self) -> tuple[str, int]:
        if self._sock is None:
            raise RuntimeError("server not started")
        return self._sock.getsockname()[:2]

    def start(self) -> "EmulatorServer":
        family = socket.AF_INET6 if ":" in self.host else socket.AF_INET
        if self.cfg.transport is Transport.TCP:
            self._sock = serve_tcp(self.cfg, self.host, self.port, family=family)
            target = self._accept_loop
        else:
            self._sock = serve_udp(self.cfg, self.host, self.port, family=family)
            target = self._udp_loop
        self._thread = threading.Thread(target=target, name=f"emu-{self.cfg.persona.value}", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
        if self._thread is not None:
            self._thread.join(timeout=2)

    def __enter__(self) -> "EmulatorServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def serve_forever(self) -> None:
        self.start()
        try:
            while not self._stop.wait(1.0):
                pass
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    def _accept_loop(self) -> None:
        assert self._sock is not None
        while not self._stop.is_set():
            try:
                r, _, _ = select.select([self._sock], [], [], 0.2)
                if not r:
                    continue
                sock, _ = self._sock.accept()
            except OSError:
                break
            with self._lock:
                seed = self._rng.getrandbits(64)
            threading.Thread(target=self._handle, args=(sock, seed), daemon=True).start()

    def _handle(self, sock: socket.socket, seed: int) -> None:
        conn = Conn(sock, self.cfg)
        rng = random.Random(seed)
        persona = self.cfg.persona
        try:
            if persona is Persona.OPENVPN:
                kind = handle_openvpn(conn, rng)
            elif persona is Persona.PORTSHARED:
                kind = handle_portshared(conn, rng)
            elif persona is Persona.OBFS4LIKE:
                kind = handle_obfs4like(conn, rng, delay=self.obfs4_delay)
            else:
                kind = HANDLERS[persona](conn, rng)
        except Exception:  # noqa: BLE001 - one bad connection must not kill the listener
            log.exception("connection handler failed")
            sock.close()
            return
        with self._lock:
            self.closes.append(kind)

    def _udp_loop(self) -> None:
        assert self._sock is not None
        session = self._rng.randbytes(8)
        while not self._stop.is_set():
            try:
                r, _, _ = select.select([self._sock], [], [], 0.2)
                if not r:
                    continue
                data, peer = self._sock.recvfrom(65536)
            except OSError:
                break
            reply = udp_reply(self.cfg, data, session)
            if reply is not None:
                try:
                    self._sock.sendto(reply, peer)
                except OSError:
                    pass


def udp_reply(cfg: EmulatorConfig, datagram: bytes, session: bytes) -> bytes | None:
    """Server reset for an unauthenticated client reset; silence otherwise."""
    if cfg.persona is not Persona.OPENVPN or cfg.tls_auth or not datagram:
        return None
    if protocol.opcode_of(datagram[0]) not in protocol.CLIENT_RESET_OPCODES:
        return None
    peer = datagram[1:9] if len(datagram) >= 9 else bytes(8)
    return protocol.server_reset(session, peer)


def serve_tcp(cfg: EmulatorConfig, host: str = "127.0.0.1", port: int = 0, *,
              family: int = socket.AF_INET) -> socket.socket:
    sock = socket.socket(family, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host, port))
    sock.listen(128)
    return sock


def serve_udp(cfg: EmulatorConfig, host: str = "127.0.0.1", port: int = 0, *,
              family: int = socket.AF_INET) -> socket.socket:
    sock = socket.socket(family, socket.SOCK_DGRAM)
    sock.bind((host, port))
    return sock
