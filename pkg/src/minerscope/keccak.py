"""Keccak sponge over the 1600-bit permutation.

``keccak256`` is the pre-standard variant (domain padding 0x01) used by
CryptoNote currencies for address checksums. With ``pad=0x06`` the same
sponge yields FIPS-202 SHA3-256.
"""
from __future__ import annotations

_MASK = (1 << 64) - 1

_RC = [
    0x0000000000000001, 0x0000000000008082, 0x800000000000808A, 0x8000000080008000,
    0x000000000000808B, 0x0000000080000001, 0x8000000080008081, 0x8000000000008009,
    0x000000000000008A, 0x0000000000000088, 0x0000000080008009, 0x000000008000000A,
    0x000000008000808B, 0x800000000000008B, 0x8000000000008089, 0x8000000000008003,
    0x8000000000008002, 0x8000000000000080, 0x000000000000800A, 0x800000008000000A,
    0x8000000080008081, 0x8000000000008080, 0x0000000080000001, 0x8000000080008008,
]

# rotation offsets indexed [x][y]
_ROT = [
    [0, 36, 3, 41, 18],
    [1, 44, 10, 45, 2],
    [62, 6, 43, 15, 61],
    [28, 55, 25, 21, 56],
    [27, 20, 39, 8, 14],
]


def _rotl(v: int, n: int) -> int:
    return ((v << n) | (v >> (64 - n))) & _MASK if n else v


def keccak_f1600(state: list[int]) -> None:
    """Permute 25 lanes in place; lane (x, y) lives at index x + 5*y."""
    a = state
    for rc in _RC:
        c = [a[x] ^ a[x + 5] ^ a[x + 10] ^ a[x + 15] ^ a[x + 20] for x in range(5)]
        d = [c[(x - 1) % 5] ^ _rotl(c[(x + 1) % 5], 1) for x in range(5)]
        for i in range(25):
            a[i] ^= d[i % 5]
        b = [0] * 25
        for x in range(5):
            for y in range(5):
                b[y + 5 * ((2 * x + 3 * y) % 5)] = _rotl(a[x + 5 * y], _ROT[x][y])
        for y in range(0, 25, 5):
            row = b[y:y + 5]
            for x in range(5):
                a[y + x] = row[x] ^ (~row[(x + 1) % 5] & row[(x + 2) % 5])
        a[0] ^= rc


def keccak(data: bytes, rate_bytes: int = 136, out_bytes: int = 32, pad: int = 0x01) -> bytes:
    state = [0] * 25
    msg = bytearray(data)
    msg.append(pad)
    msg.extend(b"\x00" * (-len(msg) % rate_bytes))
    msg[-1] |= 0x80
    for off in range(0, len(msg), rate_bytes):
        block = msg[off:off + rate_bytes]
        for i in range(rate_bytes // 8):
            state[i] ^= int.from_bytes(block[8 * i:8 * i + 8], "little")
        keccak_f1600(state)
    out = bytearray()
    while True:
        for i in range(rate_bytes // 8):
            out += state[i].to_bytes(8, "little")
        if len(out) >= out_bytes:
            return bytes(out[:out_bytes])
        keccak_f1600(state)


def keccak256(data: bytes) -> bytes:
    return keccak(bytes(data))
