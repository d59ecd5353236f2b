"""Mining identities found in WebSocket traffic: wallet addresses and site-keys."""
from __future__ import annotations

import json
import re
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Optional
from urllib.parse import parse_qs, urlsplit

from .keccak import keccak256
from .telemetry import WsFrame
from .wasm import WasmError, decode_leb128

ALPHABET = "123456789ABCDEFGHJKLMNPQRSTUVWXYZabcdefghijkmnopqrstuvwxyz"
_INDEX = {c: i for i, c in enumerate(ALPHABET)}
FULL_BLOCK = 8
FULL_ENCODED = 11
# encoded length of a block of n bytes, n = 0..8
ENCODED_SIZES = [0, 2, 3, 5, 6, 7, 9, 10, 11]
_DECODED_SIZES = {e: n for n, e in enumerate(ENCODED_SIZES)}

CHECKSUM_BYTES = 4
WALLET_RUN = re.compile(r"[1-9A-HJ-NP-Za-km-z]{90,110}")

NONDESCRIPT_KEYS = {"x", "abc", "test", "key", "sitekey", "site_key", "demo", "example", "null", "undefined"}
MIN_SITEKEY_LEN = 8


class Base58Error(ValueError):
    pass


def encode_monero_base58(data: bytes) -> str:
    out = []
    for off in range(0, len(data), FULL_BLOCK):
        block = data[off:off + FULL_BLOCK]
        num = int.from_bytes(block, "big")
        chars = []
        for _ in range(ENCODED_SIZES[len(block)]):
            num, rem = divmod(num, 58)
            chars.append(ALPHABET[rem])
        out.append("".join(reversed(chars)))
    return "".join(out)


def decode_monero_base58(text: str) -> bytes:
    """Block-wise Monero base58: 11 characters per 8 bytes, short final block."""
    for pos, ch in enumerate(text):
        if ch not in _INDEX:
            raise Base58Error(f"invalid character {ch!r} at position {pos}")
    rest = len(text) % FULL_ENCODED
    if rest not in _DECODED_SIZES:
        raise Base58Error(f"invalid final block length {rest}")
    out = bytearray()
    for off in range(0, len(text), FULL_ENCODED):
        chunk = text[off:off + FULL_ENCODED]
        size = _DECODED_SIZES[len(chunk)]
        num = 0
        for ch in chunk:
            num = num * 58 + _INDEX[ch]
        if num >> (8 * size):
            raise Base58Error(f"block at position {off} overflows {size} bytes")
        out += num.to_bytes(size, "big")
    return bytes(out)


# ---------------------------------------------------------------- currencies

def _parse_prefix_table(text: str) -> dict[int, str]:
    table = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"prefix table line {lineno}: expected 'prefix_hex = currency'")
        table[int(key.strip(), 16)] = value.strip()
    return table


def load_prefix_table(path: Optional[str] = None) -> dict[int, str]:
    if path is None:
        text = resources.files("minerscope.data").joinpath("prefixes.conf").read_text()
    else:
        with open(path) as fp:
            text = fp.read()
    return _parse_prefix_table(text)


@dataclass(frozen=True)
class WalletAddress:
    currency: str
    text: str
    payload: bytes
    checksum_ok: bool

    @property
    def prefix(self) -> Optional[int]:
        try:
            return decode_leb128(self.payload)[0]
        except WasmError:
            return None


def checksum_ok(payload: bytes) -> bool:
    if len(payload) <= CHECKSUM_BYTES:
        return False
    body, check = payload[:-CHECKSUM_BYTES], payload[-CHECKSUM_BYTES:]
    return keccak256(body)[:CHECKSUM_BYTES] == check


def classify(payload: bytes, prefixes: Mapping[int, str]) -> str:
    try:
        prefix, _ = decode_leb128(payload)
    except WasmError:
        return "unknown"
    return prefixes.get(prefix, "unknown")


def parse_address(text: str, prefixes: Optional[Mapping[int, str]] = None) -> WalletAddress:
    """Decode an address; raises :class:`Base58Error` when it is not valid base58."""
    if prefixes is None:
        prefixes = _default_prefixes()
    payload = decode_monero_base58(text)
    return WalletAddress(classify(payload, prefixes), text, payload, checksum_ok(payload))


_PREFIXES: Optional[dict[int, str]] = None


def _default_prefixes() -> dict[int, str]:
    global _PREFIXES
    if _PREFIXES is None:
        _PREFIXES = load_prefix_table()
    return _PREFIXES


# ---------------------------------------------------------------- frame scanning

@dataclass(frozen=True)
class ScanResult:
    wallets: tuple[WalletAddress, ...]
    sitekeys: tuple[str, ...]
    pools: tuple[str, ...]


def is_descriptive_key(key: str) -> bool:
    return len(key) >= MIN_SITEKEY_LEN and key.lower() not in NONDESCRIPT_KEYS


def _walk(obj, found: dict[str, set]):
    if isinstance(obj, dict):
        for k, v in obj.items():
            lk = str(k).lower()
            if isinstance(v, str):
                if lk in ("site_key", "sitekey"):
                    found["keys"].add(v)
                elif lk == "pool" and v:
                    found["pools"].add(_hostname(v))
            _walk(v, found)
    elif isinstance(obj, list):
        for v in obj:
            _walk(v, found)


def _hostname(value: str) -> str:
    value = value.strip()
    host = urlsplit(value if "//" in value else "//" + value).hostname
    return (host or value).lower()


def _json_objects(text: str):
    try:
        yield json.loads(text)
        return
    except ValueError:
        pass
    # listings often omit the outer braces
    try:
        yield json.loads("{" + text.strip().rstrip(",") + "}")
    except ValueError:
        return


def scan_frames(frames: Iterable[WsFrame], prefixes: Optional[Mapping[int, str]] = None) -> ScanResult:
    """Collect checksum-valid wallets, descriptive site-keys and pool hosts.

    Binary frames are skipped. Results are deduplicated and sorted, so the
    outcome does not depend on frame order.
    """
    if prefixes is None:
        prefixes = _default_prefixes()
    wallets: dict[str, WalletAddress] = {}
    found: dict[str, set] = {"keys": set(), "pools": set()}
    for frame in frames:
        if frame.endpoint:
            parts = urlsplit(frame.endpoint)
            if parts.hostname:
                found["pools"].add(parts.hostname.lower())
            for name, values in parse_qs(parts.query).items():
                if name.lower() in ("site_key", "sitekey", "key"):
                    found["keys"].update(values)
        if not isinstance(frame.payload, str):
            continue
        for obj in _json_objects(frame.payload):
            _walk(obj, found)
        for match in WALLET_RUN.finditer(frame.payload):
            text = match.group(0)
            try:
                addr = parse_address(text, prefixes)
            except Base58Error:
                continue
            if addr.checksum_ok:
                wallets[text] = addr
    keys = sorted(k for k in found["keys"] if is_descriptive_key(k) and k not in wallets)
    return ScanResult(tuple(wallets[k] for k in sorted(wallets)), tuple(keys), tuple(sorted(found["pools"])))


# ---------------------------------------------------------------- identity graph

@dataclass
class IdentityGraph:
    identity_sites: dict[str, set[str]] = field(default_factory=lambda: defaultdict(set))
    site_identities: dict[str, set[str]] = field(default_factory=lambda: defaultdict(set))

    @property
    def edges(self) -> set[tuple[str, str]]:
        return {(s, i) for s, ids in self.site_identities.items() for i in ids}

    def degree(self, site: str) -> int:
        return len(self.site_identities.get(site, ()))

    def histogram(self, bin_size: int = 5) -> dict[tuple[int, int], int]:
        """Identities per bin of site counts; bin k covers [k*size+1, k*size+size]."""
        counts: dict[tuple[int, int], int] = {}
        if not self.identity_sites:
            return counts
        top = max(len(s) for s in self.identity_sites.values())
        for k in range((top - 1) // bin_size + 1):
            counts[(k * bin_size + 1, k * bin_size + bin_size)] = 0
        for sites in self.identity_sites.values():
            k = (len(sites) - 1) // bin_size
            counts[(k * bin_size + 1, k * bin_size + bin_size)] += 1
        return counts

    def multi_identity_sites(self) -> list[str]:
        return sorted(s for s, ids in self.site_identities.items() if len(ids) >= 2)


def group_by_identity(observations: Iterable[tuple[str, str]]) -> IdentityGraph:
    """Build the site/identity bipartite graph from (site, identity) pairs."""
    graph = IdentityGraph()
    for site, identity in observations:
        graph.identity_sites[identity].add(site)
        graph.site_identities[site].add(identity)
    graph.identity_sites = dict(graph.identity_sites)
    graph.site_identities = dict(graph.site_identities)
    return graph
