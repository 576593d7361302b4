from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .. import protocol
from ..pcap import Transport
from .obfuscation import XorMode


class Persona(str, Enum):
    OPENVPN = "openvpn"
    HTTP = "http"
    TLS = "tls"
    SSH = "ssh"
    ECHO = "echo"
    OBFS4LIKE = "obfs4like"
    PORTSHARED = "portshared"
    RANDOM = "random"  # trace generation only


class ObfsKind(str, Enum):
    NONE = "none"
    XOR = "xor"
    TUNNEL = "tunnel"
    PADDED = "padded"


@dataclass(frozen=True)
class Obfuscation:
    kind: ObfsKind = ObfsKind.NONE
    xor_mode: XorMode = XorMode.MASK
    key: bytes = b"obfuscation-key"
    overhead: int = 29
    handshake_frames: int = 6
    pad_max: int = 255
    seed: int = 0

    def __post_init__(self) -> None:
        if self.overhead < 0 or self.handshake_frames < 0 or self.pad_max < 0:
            raise ValueError("tunnel parameters must be non-negative")
        if self.kind is ObfsKind.XOR and self.xor_mode in (XorMode.MASK, XorMode.COMPOSITE) and not self.key:
            raise ValueError("xor mask needs a non-empty key")

    @classmethod
    def parse(cls, text: str | None) -> "Obfuscation":
        """Parse ``none``, ``xor:mode=composite,key=secret``, ``tunnel:oh=29,hs=6``
        or ``padded:oh=29,hs=6,pad=255,seed=1``."""
        if not text or text == "none":
            return cls()
        kind, _, rest = text.partition(":")
        opts = dict(item.split("=", 1) for item in rest.split(",") if item)
        kind = ObfsKind(kind)
        kw: dict = {"kind": kind}
        if "mode" in opts:
            kw["xor_mode"] = XorMode(opts["mode"])
        if "key" in opts:
            kw["key"] = opts["key"].encode()
        if "oh" in opts:
            kw["overhead"] = int(opts["oh"])
        if "hs" in opts:
            kw["handshake_frames"] = int(opts["hs"])
        if "pad" in opts:
            kw["pad_max"] = int(opts["pad"])
        if "seed" in opts:
            kw["seed"] = int(opts["seed"])
        return cls(**kw)

    def describe(self) -> str:
        if self.kind is ObfsKind.NONE:
            return "none"
        if self.kind is ObfsKind.XOR:
            return f"xor:mode={self.xor_mode.value},key={self.key.decode(errors='replace')}"
        if self.kind is ObfsKind.TUNNEL:
            return f"tunnel:oh={self.overhead},hs={self.handshake_frames}"
        return f"padded:oh={self.overhead},hs={self.handshake_frames},pad={self.pad_max},seed={self.seed}"


@dataclass
class EmulatorConfig:
    """Behavior knobs for the mock server and the trace generator."""

    transport: Transport = Transport.TCP
    persona: Persona = Persona.OPENVPN
    mtu: int = 1500
    max_len: int | None = None
    tls_auth: bool = True
    hand_window: float = 60.0
    read_buffer: int | None = None
    backend: Persona = Persona.HTTP
    obfuscation: Obfuscation = field(default_factory=Obfuscation)
    ack_size: int | None = None
    obfs4_delay: tuple[float, float] = (20.0, 120.0)
    # Time spent draining in-flight bytes before choosing FIN or RST.
    settle: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_len is None:
            self.max_len = protocol.max_len_for_mtu(self.mtu)
        if self.read_buffer is None:
            self.read_buffer = self.max_len
        if self.ack_size is None:
            self.ack_size = 50 if self.transport is Transport.TCP else protocol.ACK_LEN
        self.validate()

    def validate(self) -> None:
        if self.hand_window <= 0:
            raise ValueError("hand_window must be positive")
        if not 1 <= self.max_len <= 0xFFFF:
            raise ValueError("max_len must fit the 16-bit length prefix")
        if self.read_buffer < self.max_len:
            raise ValueError(f"read_buffer {self.read_buffer} is smaller than max_len {self.max_len}")
        if self.ack_size < protocol.ACK_LEN:
            raise ValueError("ack_size below the minimal P_ACK size")
        lo, hi = self.obfs4_delay
        if not 0 <= lo <= hi:
            raise ValueError("obfs4_delay must be an ordered non-negative range")
        if self.backend in (Persona.PORTSHARED, Persona.OPENVPN, Persona.RANDOM):
            raise ValueError("port-share backend must be a non-OpenVPN service")

    @property
    def control_overhead(self) -> int:
        return self.ack_size - protocol.ACK_LEN
