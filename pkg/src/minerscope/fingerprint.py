"""Phase 3: static indicators generalized from confirmed miners."""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import IO, Iterable, Optional
from urllib.parse import urlsplit

from .profiler import MinerVerdict
from .telemetry import VisitRecord
from .wasm import codebase_hash

KINDS = ("script_url", "script_hash", "wasm_codebase_hash")


@dataclass(frozen=True)
class Fingerprint:
    kind: str
    value: str
    support: int


def strip_scheme(url: str) -> Optional[str]:
    """``https://host/path?q`` -> ``//host/path?q``; None for inline, blob: or data: URLs."""
    parts = urlsplit(url)
    if not parts.netloc or parts.scheme not in ("http", "https", ""):
        return None
    return url[len(parts.scheme) + 1:] if parts.scheme else url


def record_features(record: VisitRecord) -> set[tuple[str, str]]:
    """Every matchable feature of a visit: all script URLs and hashes plus the Wasm code base."""
    feats = set()
    for s in record.scripts:
        url = strip_scheme(s.url)
        if url:
            feats.add(("script_url", url))
        feats.add(("script_hash", s.source_hash))
    if record.wasm_modules:
        feats.add(("wasm_codebase_hash", codebase_hash(record.wasm_modules).hex()))
    return feats


def extract_features(record: VisitRecord, verdict: MinerVerdict) -> set[tuple[str, str]]:
    """Features of the script responsible for the mining load, plus the Wasm code base."""
    if not verdict.active:
        raise ValueError(f"{record.site}: features are only extracted from active miners")
    feats = set()
    script = record.script(verdict.top.script_id) if verdict.top else None
    if script is not None:
        url = strip_scheme(script.url)
        if url:
            feats.add(("script_url", url))
        feats.add(("script_hash", script.source_hash))
    if record.wasm_modules:
        feats.add(("wasm_codebase_hash", codebase_hash(record.wasm_modules).hex()))
    return feats


def support_threshold(n_miners: int, min_support_fraction: float) -> int:
    # rounding guards against 0.01 * 300 == 3.0000000000000004
    return max(1, math.ceil(round(min_support_fraction * n_miners, 9)))


def build_fingerprints(miners: Iterable[tuple[VisitRecord, MinerVerdict]],
                       min_support_fraction: float = 0.01) -> list[Fingerprint]:
    """Keep features seen on at least ``ceil(fraction * #miner sites)`` distinct sites."""
    sites_by_feature: dict[tuple[str, str], set[str]] = defaultdict(set)
    sites = set()
    for record, verdict in miners:
        sites.add(record.site)
        for feat in extract_features(record, verdict):
            sites_by_feature[feat].add(record.site)
    if not sites:
        raise ValueError("no confirmed miners to build fingerprints from")
    need = support_threshold(len(sites), min_support_fraction)
    prints = [Fingerprint(k, v, len(s)) for (k, v), s in sites_by_feature.items() if len(s) >= need]
    prints.sort(key=lambda f: (KINDS.index(f.kind), -f.support, f.value))
    return prints


def apply_fingerprints(corpus: Iterable[VisitRecord], prints: Iterable[Fingerprint],
                       confirmed: Iterable[str] = ()) -> set[str]:
    """Sites carrying any fingerprinted feature, united with the confirmed set."""
    index = {(f.kind, f.value) for f in prints}
    hits = set(confirmed)
    if not index:
        return hits
    for record in corpus:
        if record.site not in hits and record_features(record) & index:
            hits.add(record.site)
    return hits


def write_fingerprints(prints: Iterable[Fingerprint], fp: IO[str]) -> None:
    for f in prints:
        fp.write(json.dumps({"kind": f.kind, "value": f.value, "support": f.support}) + "\n")


def read_fingerprints(fp: IO[str]) -> list[Fingerprint]:
    prints = []
    for lineno, line in enumerate(fp, 1):
        if not line.strip():
            continue
        doc = json.loads(line)
        f = Fingerprint(doc["kind"], doc["value"], int(doc["support"]))
        if f.kind not in KINDS or not f.value or f.support < 1:
            raise ValueError(f"line {lineno}: invalid fingerprint {doc!r}")
        prints.append(f)
    return prints
