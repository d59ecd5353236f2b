"""WebAssembly binary parsing and the code-base digest used for fingerprints.

Only the module framing is decoded: magic, version, section headers and
the entries of the code section. Instruction streams are never inspected.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Sequence

from .telemetry import WasmArtifact

MAGIC = b"\x00asm"
VERSION = 1
CODE_SECTION = 10
CUSTOM_SECTION = 0


class WasmError(ValueError):
    pass


def decode_leb128(data: bytes, signed: bool = False, offset: int = 0) -> tuple[int, int]:
    """Decode one LEB128 integer starting at ``offset``.

    Returns ``(value, consumed)``. Values wider than 64 bits are rejected.
    """
    result = 0
    shift = 0
    pos = offset
    while True:
        if pos >= len(data):
            raise WasmError("unterminated LEB128 sequence")
        byte = data[pos]
        pos += 1
        if shift == 63:
            # tenth byte: only the lowest bit (unsigned) or a sign extension is allowed
            allowed = (0x00, 0x7F) if signed else (0x00, 0x01)
            if byte & 0x80 or byte not in allowed:
                raise WasmError("LEB128 value overflows 64 bits")
        result |= (byte & 0x7F) << shift
        shift += 7
        if not byte & 0x80:
            break
    if signed and byte & 0x40:
        result -= 1 << shift
    return result, pos - offset


def encode_leb128(value: int, signed: bool = False) -> bytes:
    if not signed and value < 0:
        raise ValueError("negative value for unsigned LEB128")
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if signed:
            done = (value == 0 and not byte & 0x40) or (value == -1 and byte & 0x40)
        else:
            done = value == 0
        if done:
            out.append(byte)
            return bytes(out)
        out.append(byte | 0x80)


@dataclass(frozen=True)
class WasmModuleParsed:
    version: int
    function_bodies: tuple[bytes, ...]
    custom_sections_skipped: int = 0


def _u32(view: memoryview, pos: int, end: int, what: str) -> tuple[int, int]:
    try:
        value, n = decode_leb128(view[:end], offset=pos)
    except WasmError as exc:
        raise WasmError(f"malformed {what}: {exc}") from None
    if value > 0xFFFFFFFF:
        raise WasmError(f"malformed {what}: exceeds u32")
    return value, pos + n


def parse_module(data: bytes) -> WasmModuleParsed:
    """Walk a binary module and return its code-section function bodies verbatim.

    Each body is the size-prefixed payload of a code entry (locals vector and
    expression, without the size prefix itself).
    """
    data = bytes(data)
    if len(data) < 8:
        raise WasmError("truncated module header")
    if data[:4] != MAGIC:
        raise WasmError("bad magic")
    version = int.from_bytes(data[4:8], "little")
    if version != VERSION:
        raise WasmError(f"unsupported version {version}")

    view = memoryview(data)
    bodies: list[bytes] = []
    customs = 0
    pos = 8
    while pos < len(data):
        section_id = data[pos]
        size, pos = _u32(view, pos + 1, len(data), "section size")
        end = pos + size
        if end > len(data):
            raise WasmError(f"truncated section {section_id}")
        if section_id == CUSTOM_SECTION:
            customs += 1
        elif section_id == CODE_SECTION:
            count, p = _u32(view, pos, end, "function count")
            for _ in range(count):
                body_size, p = _u32(view, p, end, "body size")
                if p + body_size > end:
                    raise WasmError("function body runs past code section")
                bodies.append(data[p:p + body_size])
                p += body_size
            if p != end:
                raise WasmError("code section size mismatch")
        pos = end
    return WasmModuleParsed(version, tuple(bodies), customs)


def build_module(bodies: Sequence[bytes]) -> bytes:
    """Assemble a minimal module exposing one ``() -> ()`` type and the given bodies."""
    def section(sid: int, payload: bytes) -> bytes:
        return bytes([sid]) + encode_leb128(len(payload)) + payload

    n = len(bodies)
    types = section(1, b"\x01\x60\x00\x00")
    funcs = section(3, encode_leb128(n) + b"\x00" * n)
    code = section(CODE_SECTION, encode_leb128(n) + b"".join(encode_leb128(len(b)) + b for b in bodies))
    return MAGIC + VERSION.to_bytes(4, "little") + (types + funcs + code if n else b"")


def ordered_bodies(bodies: Iterable[bytes]) -> list[bytes]:
    """Bodies sorted by ascending hex SHA-1; duplicates are kept."""
    return sorted(bodies, key=lambda b: (hashlib.sha1(b).hexdigest(), b))


def codebase_hash(artifacts: Iterable[WasmArtifact], mode: str = "bodies") -> bytes:
    """SHA-256 over all function bodies concatenated in SHA-1 order.

    ``mode="digests"`` concatenates the 20-byte SHA-1 digests instead of the
    bodies themselves.
    """
    bodies = [b for art in artifacts for b in art.function_bodies]
    if not bodies:
        raise WasmError("no function bodies to hash")
    ordered = ordered_bodies(bodies)
    if mode == "bodies":
        blob = b"".join(ordered)
    elif mode == "digests":
        blob = b"".join(hashlib.sha1(b).digest() for b in ordered)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return hashlib.sha256(blob).digest()
