import hashlib
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from minerscope.telemetry import WasmArtifact
from minerscope.wasm import (
    WasmError,
    build_module,
    codebase_hash,
    decode_leb128,
    encode_leb128,
    ordered_bodies,
    parse_module,
)
from conftest import run_node

# Hand-assembled: type section (one () -> i32 signature), function section
# (two functions), an empty "name" custom section, and a code section whose
# bodies are `i32.const 42` and `(local i32) local.get 0`.
TINY_MODULE = bytes.fromhex(
    "0061736d" "01000000"
    "01" "05" "01" "60" "00" "01" "7f"
    "03" "03" "02" "00" "00"
    "00" "05" "04" "6e616d65"
    "0a" "0d" "02" "04" "00412a0b" "06" "01017f20000b"
)
TINY_BODIES = (bytes.fromhex("00412a0b"), bytes.fromhex("01017f20000b"))


def test_fixture_is_a_valid_module_for_an_independent_engine():
    out = run_node(f"console.log(WebAssembly.validate(Buffer.from('{TINY_MODULE.hex()}', 'hex')))")
    assert out == "true"


def test_tiny_fixture_yields_two_verbatim_bodies():
    parsed = parse_module(TINY_MODULE)
    assert parsed.version == 1
    assert parsed.function_bodies == TINY_BODIES
    assert parsed.custom_sections_skipped == 1


def test_header_only_module_has_no_bodies():
    parsed = parse_module(b"\x00asm\x01\x00\x00\x00")
    assert parsed.function_bodies == ()


@pytest.mark.parametrize("data, message", [
    (b"\x00asn\x01\x00\x00\x00", "magic"),
    (b"\x00asm\x02\x00\x00\x00", "version"),
    (b"\x00as", "header"),
    (b"\x00asm\x01\x00\x00\x00\x0a\x05\x01", "truncated"),
    (b"\x00asm\x01\x00\x00\x00\x0a\x80", "LEB128"),
])
def test_malformed_modules(data, message):
    with pytest.raises(WasmError, match=message):
        parse_module(data)


def _section_ends(module: bytes) -> set[int]:
    ends, pos = set(), 8
    while pos < len(module):
        size, n = decode_leb128(module, offset=pos + 1)
        pos += 1 + n + size
        ends.add(pos)
    return ends


def test_truncation_inside_a_section_always_errors():
    module = build_module([bytes([0, 0x41, i, 0x1a, 0x0b]) for i in range(20)])
    parse_module(module)
    boundaries = _section_ends(module)
    for cut in range(9, len(module)):
        if cut in boundaries:
            continue  # a shorter but complete module
        with pytest.raises(WasmError):
            parse_module(module[:cut])


@given(st.binary(max_size=64))
def test_garbage_after_header_never_crashes(tail):
    try:
        parse_module(b"\x00asm\x01\x00\x00\x00" + tail)
    except WasmError:
        pass


def test_built_module_validates_in_node():
    bodies = [bytes([0, 0x41, 5, 0x1a, 0x0b]), bytes([1, 2, 0x7f, 0x20, 0, 0x1a, 0x0b])]
    module = build_module(bodies)
    assert parse_module(module).function_bodies == tuple(bodies)
    assert run_node(f"console.log(WebAssembly.validate(Buffer.from('{module.hex()}', 'hex')))") == "true"


@pytest.mark.parametrize("data, signed, expected", [
    (b"\x00", False, (0, 1)),
    (b"\xe5\x8e\x26", False, (624485, 3)),
    (b"\xc0\xbb\x78", True, (-123456, 3)),
    (b"\x7f", True, (-1, 1)),
    (b"\x7f", False, (127, 1)),
    (b"\xff" * 9 + b"\x01", False, (2**64 - 1, 10)),
    (b"\x80" * 9 + b"\x7f", True, (-(2**63), 10)),
])
def test_leb128_vectors(data, signed, expected):
    assert decode_leb128(data, signed) == expected


def test_leb128_errors():
    with pytest.raises(WasmError, match="unterminated"):
        decode_leb128(b"\x80")
    with pytest.raises(WasmError, match="overflow"):
        decode_leb128(b"\xff" * 9 + b"\x02")
    with pytest.raises(WasmError, match="overflow"):
        decode_leb128(b"\x80" * 10 + b"\x00")


@given(st.integers(0, 2**64 - 1))
def test_leb128_unsigned_round_trip(v):
    enc = encode_leb128(v)
    assert decode_leb128(enc) == (v, len(enc))
    assert len(enc) <= 10


@given(st.integers(-(2**63), 2**63 - 1))
def test_leb128_signed_round_trip(v):
    enc = encode_leb128(v, signed=True)
    assert decode_leb128(enc, signed=True) == (v, len(enc))


def test_leb128_offset():
    assert decode_leb128(b"\xff\xe5\x8e\x26", offset=1) == (624485, 3)


def _oracle(bodies):
    keyed = sorted((hashlib.sha1(b).hexdigest(), b) for b in bodies)
    return hashlib.sha256(b"".join(b for _, b in keyed)).digest()


def test_single_body_hash_is_plain_sha256():
    assert codebase_hash([WasmArtifact("m", (b"abc",))]) == hashlib.sha256(b"abc").digest()


def test_hash_ignores_order_and_grouping():
    x, y, z = b"\x00\x0b", b"\x00\x41\x01\x0b", b"\x01\x01\x7f\x0b"
    a = codebase_hash([WasmArtifact("m", (x, y, z))])
    b = codebase_hash([WasmArtifact("m", (z,)), WasmArtifact("n", (y, x))])
    assert a == b


def test_hash_matches_scripted_oracle_on_random_bodies():
    rng = random.Random(7)
    for _ in range(50):
        bodies = tuple(rng.randbytes(rng.randint(1, 40)) for _ in range(3))
        assert codebase_hash([WasmArtifact("m", bodies)]) == _oracle(bodies)


def test_duplicates_are_kept():
    one = codebase_hash([WasmArtifact("m", (b"a",))])
    two = codebase_hash([WasmArtifact("m", (b"a", b"a"))])
    assert one != two


def test_digest_mode_hashes_sha1_digests():
    bodies = (b"one", b"two")
    expected = hashlib.sha256(b"".join(hashlib.sha1(b).digest() for b in ordered_bodies(bodies))).digest()
    assert codebase_hash([WasmArtifact("m", bodies)], mode="digests") == expected


def test_empty_input_is_an_error():
    with pytest.raises(WasmError):
        codebase_hash([])
