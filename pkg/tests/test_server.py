import socket
import time

import pytest

from ovpnfp import protocol
from ovpnfp.emulator.config import EmulatorConfig, Persona
from ovpnfp.emulator.server import CloseKind, EmulatorServer, close_kind_for, udp_reply
from ovpnfp.pcap import Transport


def exchange(addr, payload, timeout=5.0):
    """(reply bytes, 'fin'|'rst'|'none', seconds until close)."""
    s = socket.create_connection(addr, timeout=timeout)
    start = time.monotonic()
    s.sendall(payload)
    data = bytearray()
    try:
        while True:
            chunk = s.recv(65536)
            if not chunk:
                return bytes(data), "fin", time.monotonic() - start
            data += chunk
    except ConnectionResetError:
        return bytes(data), "rst", time.monotonic() - start
    except socket.timeout:
        return bytes(data), "none", time.monotonic() - start
    finally:
        s.close()


@pytest.mark.parametrize(
    "received,buffer,expected",
    [(2000, 1600, CloseKind.RST), (16, 1627, CloseKind.FIN), (1627, 1627, CloseKind.FIN),
     (1628, 1627, CloseKind.RST), (0, 1627, CloseKind.FIN)],
)
def test_close_kind_rule(received, buffer, expected):
    assert close_kind_for(received, buffer) is expected


def test_udp_reply_depends_on_tls_auth():
    reset = protocol.client_reset(b"\x01" * 8)
    off = EmulatorConfig(transport=Transport.UDP, tls_auth=False)
    on = EmulatorConfig(transport=Transport.UDP)
    reply = udp_reply(off, reset, b"\x02" * 8)
    assert reply is not None and protocol.opcode_of(reply[0]) in protocol.SERVER_RESET_OPCODES
    assert udp_reply(on, reset, b"\x02" * 8) is None
    assert udp_reply(off, b"\xff\x00garbage", b"\x02" * 8) is None
    assert udp_reply(off, b"", b"\x02" * 8) is None


def test_read_buffer_below_max_len_rejected():
    with pytest.raises(ValueError):
        EmulatorServer(EmulatorConfig(read_buffer=100))
    with pytest.raises(ValueError):
        EmulatorServer(EmulatorConfig(persona=Persona.RANDOM))


@pytest.fixture
def hmac_server():
    with EmulatorServer(EmulatorConfig(hand_window=1.0, seed=1)) as srv:
        yield srv


def test_invalid_length_closes_immediately(hmac_server):
    data, kind, dt = exchange(hmac_server.address, bytes.fromhex("065c"))
    assert (data, kind) == (b"", "fin") and dt < 0.5


def test_complete_frame_closes_silently(hmac_server):
    data, kind, dt = exchange(hmac_server.address, protocol.tcp_frame(protocol.client_reset(b"\x07" * 8)))
    assert (data, kind) == (b"", "fin") and dt < 0.5


def test_partial_frame_waits_hand_window(hmac_server):
    data, kind, dt = exchange(hmac_server.address, b"\x00\x0e\x38\x00")
    assert kind == "fin" and 0.9 <= dt < 1.6


def test_oversized_send_gets_rst(hmac_server):
    _, kind, _ = exchange(hmac_server.address, b"\x86" + bytes(1999))
    assert kind == "rst"
    assert CloseKind.RST in hmac_server.closes


def test_no_hmac_answers_client_reset():
    with EmulatorServer(EmulatorConfig(tls_auth=False, hand_window=0.5)) as srv:
        data, _, _ = exchange(srv.address, protocol.tcp_frame(protocol.client_reset(b"\x07" * 8)))
    assert int.from_bytes(data[:2], "big") == len(data) - 2
    assert protocol.opcode_of(data[2]) in protocol.SERVER_RESET_OPCODES


def test_portshared_routes_invalid_length_to_backend():
    with EmulatorServer(EmulatorConfig(persona=Persona.PORTSHARED, hand_window=1.0)) as srv:
        data, _, _ = exchange(srv.address, b"GET / HTTP/1.0\r\n\r\n")
        assert data.startswith(b"HTTP/1.0 200")
        data, kind, dt = exchange(srv.address, b"\x00\x05\x38abcd")
        assert data == b"" and kind == "fin" and dt < 0.5


@pytest.mark.parametrize(
    "persona,payload,prefix",
    [(Persona.HTTP, b"\r\n\r\n", b"HTTP/1.0 400"), (Persona.TLS, b"\x16\x03\x01\x00\x05hello", b"\x16\x03\x03"),
     (Persona.TLS, b"\x00\x01", b"\x15\x03\x03"), (Persona.SSH, b"SSH-2.0-x\r\n", b"SSH-2.0-"),
     (Persona.ECHO, b"ping", b"ping")],
)
def test_negative_personas_answer(persona, payload, prefix):
    with EmulatorServer(EmulatorConfig(persona=persona, hand_window=0.5)) as srv:
        data, _, _ = exchange(srv.address, payload)
    assert data.startswith(prefix)


def test_obfs4like_delay_drawn_once_and_honored():
    cfg = EmulatorConfig(persona=Persona.OBFS4LIKE, obfs4_delay=(0.3, 0.6), seed=3)
    with EmulatorServer(cfg) as srv:
        assert 0.3 <= srv.obfs4_delay <= 0.6
        times = [exchange(srv.address, b"\x00\x0e")[2] for _ in range(2)]
        _, kind, _ = exchange(srv.address, bytes(3000))
    for t in times:
        assert abs(t - srv.obfs4_delay) < 0.2
    assert kind == "rst"


def test_udp_listener():
    cfg = EmulatorConfig(transport=Transport.UDP, tls_auth=False)
    with EmulatorServer(cfg) as srv:
        with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
            s.settimeout(2)
            s.sendto(protocol.client_reset(b"\x01" * 8), srv.address)
            reply, _ = s.recvfrom(2048)
    assert protocol.opcode_of(reply[0]) in protocol.SERVER_RESET_OPCODES
