"""Per-function CPU load from aggregated call stacks, and the phase 1/2 verdicts.

Load is reported two ways:

* ``load_pct`` -- attributed time over profile duration, in percent of one
  core. Four saturated workers give 400.
* ``share_pct`` -- the same time over duration times reported cores, i.e. the
  share of the machine the page was allowed to see. Four saturated workers
  on four reported cores give 100.

Thresholds compare against ``load_pct``.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Optional

from .telemetry import FrameRef, VisitRecord

log = logging.getLogger(__name__)

WASM_ROOT = FrameRef("(wasm-root)", "")

PHASE1_LOAD_PCT = 5.0
PHASE1_WORKERS = 3
PHASE2_LOAD_PCT = 10.0
PHASE2_MIN_DURATION_MS = 30_000


class ProfileMissing(ValueError):
    pass


@dataclass(frozen=True)
class FunctionLoad:
    attributed_function: FrameRef
    script_id: str
    total_ms: float
    load_pct: float
    share_pct: float


@dataclass(frozen=True)
class CandidateFlags:
    high_load: bool
    uses_wasm: bool
    many_workers: bool

    @property
    def candidate(self) -> bool:
        return self.high_load or self.uses_wasm or self.many_workers


@dataclass(frozen=True)
class MinerVerdict:
    active: bool
    top: Optional[FunctionLoad] = None
    responsible_script_url: Optional[str] = None


def attribute(frames: tuple[FrameRef, ...]) -> FrameRef:
    """The function charged for a stack: its leaf, or for Wasm the nearest named JS caller."""
    leaf = frames[0]
    if not leaf.is_wasm:
        return leaf
    for fr in frames[1:]:
        if fr.script_id and not fr.is_wasm:
            return fr
    return WASM_ROOT


def function_loads(record: VisitRecord) -> list[FunctionLoad]:
    """Aggregate stack time per attributed function, highest load first.

    A function is identified by its name plus the content hash of its script,
    so the same code running in several workers (each with its own script id)
    is summed into one entry.
    """
    prof = record.profile
    if prof is None or not prof.stacks:
        return []
    hashes = {s.script_id: s.source_hash for s in record.scripts}
    totals: dict[tuple[str, str], float] = defaultdict(float)
    reps: dict[tuple[str, str], FrameRef] = {}
    for st in prof.stacks:
        if st.total_ms <= 0:
            continue
        fn = attribute(st.frames)
        key = (fn.function_name, hashes.get(fn.script_id, fn.script_id))
        totals[key] += st.total_ms
        if key not in reps or fn.script_id < reps[key].script_id:
            reps[key] = fn
    loads = []
    for key, total in totals.items():
        fn = reps[key]
        pct = total / prof.duration_ms * 100.0
        loads.append(FunctionLoad(fn, fn.script_id, total, pct, pct / record.reported_cores))
    loads.sort(key=lambda fl: (-fl.total_ms, fl.attributed_function.function_name, fl.script_id))
    return loads


def phase1_flags(record: VisitRecord, load_threshold_pct: float = PHASE1_LOAD_PCT,
                 worker_threshold: int = PHASE1_WORKERS) -> CandidateFlags:
    loads = function_loads(record) if record.profile is not None else []
    return CandidateFlags(
        high_load=any(fl.load_pct > load_threshold_pct for fl in loads),
        uses_wasm=bool(record.wasm_modules),
        many_workers=record.worker_count > worker_threshold,
    )


def phase2_verdict(record: VisitRecord, threshold_pct: float = PHASE2_LOAD_PCT,
                   min_duration_ms: float = PHASE2_MIN_DURATION_MS) -> MinerVerdict:
    if record.profile is None or not record.profile.stacks:
        raise ProfileMissing(f"{record.site}: no profile to validate")
    if record.profile.duration_ms < min_duration_ms:
        log.warning("%s: profile of %.0f ms is shorter than %.0f ms", record.site,
                    record.profile.duration_ms, min_duration_ms)
    loads = function_loads(record)
    top = loads[0] if loads else None
    if top is None or top.load_pct < threshold_pct:
        return MinerVerdict(False, top, None)
    script = record.script(top.script_id)
    return MinerVerdict(True, top, script.url if script else None)
