"""OpenVPN wire constants shared by the filter, prober and emulator."""

import struct

# Message types (high 5 bits of the first header byte).
P_CONTROL_HARD_RESET_CLIENT_V1 = 1
P_CONTROL_HARD_RESET_SERVER_V1 = 2
P_CONTROL_SOFT_RESET_V1 = 3
P_CONTROL_V1 = 4
P_ACK_V1 = 5
P_DATA_V1 = 6
P_CONTROL_HARD_RESET_CLIENT_V2 = 7
P_CONTROL_HARD_RESET_SERVER_V2 = 8
P_DATA_V2 = 9
P_CONTROL_HARD_RESET_CLIENT_V3 = 10
P_CONTROL_WKC_V1 = 11

CLIENT_RESET_OPCODES = frozenset(
    {P_CONTROL_HARD_RESET_CLIENT_V1, P_CONTROL_HARD_RESET_CLIENT_V2, P_CONTROL_HARD_RESET_CLIENT_V3}
)
SERVER_RESET_OPCODES = frozenset({P_CONTROL_HARD_RESET_SERVER_V1, P_CONTROL_HARD_RESET_SERVER_V2})


def header_byte(opcode: int, key_id: int = 0) -> int:
    return ((opcode & 0x1F) << 3) | (key_id & 0x07)


def opcode_of(first_byte: int) -> int:
    return first_byte >> 3


CLIENT_RESET = header_byte(P_CONTROL_HARD_RESET_CLIENT_V2)  # 0x38
SERVER_RESET = header_byte(P_CONTROL_HARD_RESET_SERVER_V2)  # 0x40
CONTROL = header_byte(P_CONTROL_V1)  # 0x20
ACK = header_byte(P_ACK_V1)  # 0x28
DATA = header_byte(P_DATA_V2)  # 0x48

# Sizes without tls-auth: opcode + session id + ack array + packet ids.
CLIENT_RESET_LEN = 14
SERVER_RESET_LEN = 26
ACK_LEN = 22
# HMAC-SHA1 + replay packet id + timestamp added by tls-auth.
TLS_AUTH_OVERHEAD = 28

TCP_LENGTH_PREFIX = 2

# Calibrated so that the default TUN MTU of 1500 yields max_len 1627.
MAX_LEN_OVERHEAD = 127


def max_len_for_mtu(mtu: int) -> int:
    return mtu + MAX_LEN_OVERHEAD


def tcp_frame(packet: bytes) -> bytes:
    """Prepend the 2-byte big-endian length used in TCP mode."""
    return struct.pack(">H", len(packet)) + packet


def server_reset(session_id: bytes, peer_session_id: bytes, packet_id: int = 0) -> bytes:
    """A plaintext P_CONTROL_HARD_RESET_SERVER_V2 acknowledging the client's reset."""
    return (
        bytes([SERVER_RESET])
        + session_id
        + b"\x01"
        + struct.pack(">I", 0)
        + peer_session_id
        + struct.pack(">I", packet_id)
    )


def client_reset(session_id: bytes, packet_id: int = 0) -> bytes:
    return bytes([CLIENT_RESET]) + session_id + b"\x00" + struct.pack(">I", packet_id)
