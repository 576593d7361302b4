"""XOR-patch scramblers and their inverses.

Every transform keeps byte 0 on a fixed position, so equal first bytes in
the plaintext stay equal after obfuscation.
"""

from __future__ import annotations

from enum import Enum


class XorMode(str, Enum):
    MASK = "mask"
    PTRPOS = "ptrpos"
    REVERSE = "reverse"
    COMPOSITE = "composite"


def _check(buf: bytes) -> None:
    if not buf:
        raise ValueError("empty buffer")


def xor_mask(buf: bytes, key: bytes) -> bytes:
    _check(buf)
    if not key:
        raise ValueError("empty key")
    k = len(key)
    return bytes(b ^ key[i % k] for i, b in enumerate(buf))


def xor_ptr_pos(buf: bytes) -> bytes:
    _check(buf)
    return bytes(b ^ ((i + 1) & 0xFF) for i, b in enumerate(buf))


def reverse_keep_first(buf: bytes) -> bytes:
    _check(buf)
    return buf[:1] + buf[:0:-1]


def obfuscate_composite(buf: bytes, key: bytes) -> bytes:
    return xor_mask(xor_ptr_pos(reverse_keep_first(xor_ptr_pos(buf))), key)


def deobfuscate_composite(buf: bytes, key: bytes) -> bytes:
    return xor_ptr_pos(reverse_keep_first(xor_ptr_pos(xor_mask(buf, key))))


def obfuscate(mode: XorMode, buf: bytes, key: bytes = b"") -> bytes:
    if mode is XorMode.MASK:
        return xor_mask(buf, key)
    if mode is XorMode.PTRPOS:
        return xor_ptr_pos(buf)
    if mode is XorMode.REVERSE:
        return reverse_keep_first(buf)
    return obfuscate_composite(buf, key)


def deobfuscate(mode: XorMode, buf: bytes, key: bytes = b"") -> bytes:
    if mode is XorMode.COMPOSITE:
        return deobfuscate_composite(buf, key)
    # The single-step transforms are involutions.
    return obfuscate(mode, buf, key)
