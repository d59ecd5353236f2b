"""Revenue model and throttle (greediness) estimation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Optional

from .profiler import MinerVerdict
from .telemetry import VisitRecord

SECONDS_PER_HOUR = 3600.0


@dataclass(frozen=True)
class PayoutModel:
    hash_rate_hps: float = 80.0
    payout_xmr_per_mhash: float = 0.00005749
    xmr_usd: float = 225.0

    def __post_init__(self):
        if min(self.hash_rate_hps, self.payout_xmr_per_mhash, self.xmr_usd) <= 0:
            raise ValueError("payout model parameters must be strictly positive")


@dataclass(frozen=True)
class VisitStats:
    site: str
    visits_per_day: float
    avg_duration_s: float

    def __post_init__(self):
        if self.visits_per_day < 0 or self.avg_duration_s < 0:
            raise ValueError(f"{self.site}: visit statistics must be non-negative")


@dataclass(frozen=True)
class CpuBench:
    model: str
    cache_mb: float
    hps_core: float
    hps_cpu: float

    def __post_init__(self):
        if self.hps_cpu < self.hps_core:
            raise ValueError(f"{self.model}: whole-CPU rate below single-core rate")


@dataclass(frozen=True)
class RevenueEstimate:
    core_hours_per_day: float
    hashes_per_day: float
    xmr_per_day: float
    usd_per_day: float

    def display(self) -> dict:
        """Rounded for tables: XMR to one decimal, USD to whole dollars."""
        return {
            "core_hours_per_day": round(self.core_hours_per_day),
            "xmr_per_day": round(self.xmr_per_day, 1),
            "usd_per_day": round(self.usd_per_day),
        }


def revenue_from_core_hours(core_hours: float, model: PayoutModel = PayoutModel()) -> RevenueEstimate:
    hashes = core_hours * SECONDS_PER_HOUR * model.hash_rate_hps
    xmr = hashes / 1e6 * model.payout_xmr_per_mhash
    return RevenueEstimate(core_hours, hashes, xmr, xmr * model.xmr_usd)


def estimate_revenue(stats: VisitStats, model: PayoutModel = PayoutModel()) -> RevenueEstimate:
    return revenue_from_core_hours(stats.visits_per_day * stats.avg_duration_s / SECONDS_PER_HOUR, model)


def upper_bound(total_visitor_hours_per_day: float, model: PayoutModel = PayoutModel()) -> RevenueEstimate:
    if total_visitor_hours_per_day <= 0:
        raise ValueError("visitor hours must be positive")
    return revenue_from_core_hours(total_visitor_hours_per_day, model)


def load_visit_stats(path) -> list[VisitStats]:
    with open(path, newline="") as fp:
        return [VisitStats(row["site"], float(row["visits_per_day"]), float(row["avg_duration_s"]))
                for row in csv.DictReader(fp)]


def load_cpu_bench(path: Optional[str] = None) -> list[CpuBench]:
    if path is None:
        text = resources.files("minerscope.data").joinpath("cpus.csv").read_text()
    else:
        with open(path, newline="") as fp:
            text = fp.read()
    rows = csv.DictReader(text.splitlines())
    return [CpuBench(r["model"], float(r["cache_mb"]), float(r["hps_core"]), float(r["hps_cpu"])) for r in rows]


# ---------------------------------------------------------------- greediness

@dataclass(frozen=True)
class ThrottleEstimate:
    cpu_consumption_pct: float
    throttle_est: float
    oversubscribed: bool


def estimate_throttle(record: VisitRecord, verdict: MinerVerdict) -> ThrottleEstimate:
    """Machine share used by the mining function, and the throttle that would produce it."""
    if not verdict.active or verdict.top is None:
        raise ValueError(f"{record.site}: throttle is only estimated for active miners")
    consumption = verdict.top.load_pct / record.reported_cores
    return ThrottleEstimate(
        cpu_consumption_pct=consumption,
        throttle_est=1.0 - min(1.0, consumption / 100.0),
        oversubscribed=record.worker_count > record.reported_cores,
    )


GREEDINESS_BINS = [f"{10 * k}-{10 * k + 10}" for k in range(10)] + [">100"]


def greediness_bin(consumption_pct: float) -> str:
    if consumption_pct > 100.0 + 1e-9:
        return ">100"
    k = min(9, math.floor(consumption_pct / 10.0 + 1e-9))
    return GREEDINESS_BINS[max(0, k)]


def greediness_histogram(estimates: Iterable[ThrottleEstimate]) -> dict[str, int]:
    """Counts per 10-point consumption bin; the 90-100 bin includes exactly 100."""
    counts = {b: 0 for b in GREEDINESS_BINS}
    for est in estimates:
        counts[greediness_bin(est.cpu_consumption_pct)] += 1
    return counts
