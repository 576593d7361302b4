"""Behavioral OpenVPN mock server, non-VPN personas and synthetic traces."""

from .config import EmulatorConfig, Obfuscation, ObfsKind, Persona
from .obfuscation import (
    XorMode,
    deobfuscate,
    deobfuscate_composite,
    obfuscate,
    obfuscate_composite,
    reverse_keep_first,
    xor_mask,
    xor_ptr_pos,
)
from .traces import SyntheticTrace, TraceFrame, generate_trace, wrap_padded, wrap_tunnel

__all__ = [
    "EmulatorConfig",
    "Obfuscation",
    "ObfsKind",
    "Persona",
    "SyntheticTrace",
    "TraceFrame",
    "XorMode",
    "deobfuscate",
    "deobfuscate_composite",
    "generate_trace",
    "obfuscate",
    "obfuscate_composite",
    "reverse_keep_first",
    "wrap_padded",
    "wrap_tunnel",
    "xor_mask",
    "xor_ptr_pos",
]
