"""Three-phase pipeline orchestration and distribution tables."""
from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Optional, Union

from .config import Settings
from .fingerprint import Fingerprint, apply_fingerprints, build_fingerprints
from .profiler import MinerVerdict, phase1_flags, phase2_verdict
from .telemetry import VisitRecord

log = logging.getLogger(__name__)


@dataclass
class PipelineResult:
    suspicious: set[str] = field(default_factory=set)
    active: set[str] = field(default_factory=set)
    total: set[str] = field(default_factory=set)
    missing_phase2: set[str] = field(default_factory=set)
    verdicts: dict[str, MinerVerdict] = field(default_factory=dict)
    fingerprints: list[Fingerprint] = field(default_factory=list)

    def summary(self) -> dict[str, int]:
        return {
            "suspicious": len(self.suspicious),
            "active": len(self.active),
            "total": len(self.total),
            "phase3_gain": len(self.total - self.active),
            "missing_phase2": len(self.missing_phase2),
            "fingerprints": len(self.fingerprints),
        }


def _by_site(records: Iterable[VisitRecord]) -> dict[str, VisitRecord]:
    # a later visit of the same site supersedes an earlier one
    return {r.site: r for r in records}


def run_pipeline(corpus1: Iterable[VisitRecord], corpus2: Iterable[VisitRecord],
                 settings: Settings = Settings()) -> PipelineResult:
    """Candidates from short profiles, validation from long ones, then fingerprint generalisation.

    A long-profile record is validated when its site was a candidate or was
    never seen in the short-profile corpus.
    """
    first = list(corpus1)
    second = _by_site(corpus2)
    result = PipelineResult()
    seen_first = set()
    for record in first:
        seen_first.add(record.site)
        if phase1_flags(record, settings.phase1.load_pct, settings.phase1.workers).candidate:
            result.suspicious.add(record.site)

    confirmed: list[tuple[VisitRecord, MinerVerdict]] = []
    for site in sorted(result.suspicious | (set(second) - seen_first)):
        record = second.get(site)
        if record is None or record.profile is None:
            if site in result.suspicious:
                result.missing_phase2.add(site)
                log.warning("%s: suspicious but no long profile recorded", site)
            continue
        if not record.profile.stacks:
            continue
        verdict = phase2_verdict(record, settings.phase2.load_pct, settings.phase2.min_duration_ms)
        result.verdicts[site] = verdict
        if verdict.active:
            result.active.add(site)
            confirmed.append((record, verdict))

    result.total = set(result.active)
    if confirmed:
        result.fingerprints = build_fingerprints(confirmed, settings.fingerprint.min_support_fraction)
        result.total = apply_fingerprints(first + list(second.values()), result.fingerprints, result.active)
    return result


# ---------------------------------------------------------------- distributions

UNRANKED = "unranked"


def rank_histogram(sites: Iterable[str], records: Iterable[VisitRecord], bin_size: int = 100_000,
                   max_rank: Optional[int] = None) -> dict[Union[int, str], int]:
    """Count sites per popularity bin; bin ``k`` holds ranks ``((k-1)*size, k*size]``.

    Bins up to ``max_rank`` (or the highest rank seen) are always present.
    Sites without a rank are counted under ``"unranked"``.
    """
    if bin_size < 1:
        raise ValueError("bin_size must be >= 1")
    ranks = {r.site: r.rank for r in records}
    wanted = set(sites)
    counts = Counter((ranks[s] - 1) // bin_size + 1 if ranks.get(s) else UNRANKED for s in wanted)
    top = max([k for k in counts if k != UNRANKED] + [0])
    if max_rank is not None:
        top = max(top, (max_rank - 1) // bin_size + 1)
    hist: dict[Union[int, str], int] = {k: counts.get(k, 0) for k in range(1, top + 1)}
    if counts.get(UNRANKED):
        hist[UNRANKED] = counts[UNRANKED]
    return hist


def tabulate(enrichment: Mapping[str, Union[str, Iterable[str]]], miner_sites: Iterable[str],
             top: Optional[int] = None) -> list[tuple[str, int]]:
    """Count miner sites per value, highest count first, ties by name.

    A site with several values (e.g. categories) counts once for each.
    """
    counts: Counter = Counter()
    for site in set(miner_sites):
        values = enrichment.get(site)
        if values is None:
            continue
        if isinstance(values, str):
            values = [values]
        counts.update(set(values))
    rows = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return rows[:top] if top is not None else rows


@dataclass
class EnrichmentTables:
    geo: dict[str, str] = field(default_factory=dict)
    categories: dict[str, list[str]] = field(default_factory=dict)

    def unknown_sites(self, corpus_sites: Iterable[str]) -> list[str]:
        """Enriched sites that do not occur in the corpus (logged as warnings)."""
        known = set(corpus_sites)
        stray = sorted((set(self.geo) | set(self.categories)) - known)
        for site in stray:
            log.warning("enrichment refers to %s, which is not in the corpus", site)
        return stray


def load_geo(fp: IO[str]) -> dict[str, str]:
    """CSV with columns ``site,country``."""
    return {row["site"].strip(): row["country"].strip() for row in csv.DictReader(fp) if row["site"].strip()}


def load_categories(fp: IO[str]) -> dict[str, list[str]]:
    """CSV with columns ``site,category``; repeat rows or separate with ``;`` for several."""
    cats: dict[str, list[str]] = {}
    for row in csv.DictReader(fp):
        site = row["site"].strip()
        for cat in row["category"].split(";"):
            cat = cat.strip()
            if site and cat and cat not in cats.setdefault(site, []):
                cats[site].append(cat)
    return cats


def write_table(rows: Iterable[tuple], header: tuple[str, ...], fp: IO[str]) -> None:
    w = csv.writer(fp)
    w.writerow(header)
    w.writerows(rows)
