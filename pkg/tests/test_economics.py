import pytest

from minerscope.economics import (
    GREEDINESS_BINS,
    CpuBench,
    PayoutModel,
    VisitStats,
    estimate_revenue,
    estimate_throttle,
    greediness_bin,
    greediness_histogram,
    load_cpu_bench,
    load_visit_stats,
    revenue_from_core_hours,
    upper_bound,
)
from minerscope.profiler import MinerVerdict, phase2_verdict
from minerscope.testbed import ThrottleSpec, synth_visit
from minerscope.testbed import testbed_specs as grid


def test_site_estimate():
    est = estimate_revenue(VisitStats("cinecalidad.to", 1.3e6, 250))
    assert est.core_hours_per_day == pytest.approx(90_277.8, abs=0.1)
    assert est.xmr_per_day == pytest.approx(1.4947, abs=1e-4)
    assert est.display()["xmr_per_day"] == 1.5


def test_zero_visits():
    est = estimate_revenue(VisitStats("x", 0, 300))
    assert (est.core_hours_per_day, est.hashes_per_day, est.xmr_per_day, est.usd_per_day) == (0, 0, 0, 0)


def test_average_site():
    est = revenue_from_core_hours(1550)
    assert est.xmr_per_day == pytest.approx(0.02566, abs=1e-5)
    assert est.usd_per_day == pytest.approx(5.77, abs=0.01)


def test_platform_upper_bound():
    est = upper_bound(13.5e6)
    assert est.xmr_per_day == pytest.approx(223.5, abs=0.05)
    assert est.usd_per_day == pytest.approx(50_292, abs=1)
    assert abs(est.xmr_per_day - 223.1) / 223.1 < 0.005
    assert 81e6 * 599 / 3600 == pytest.approx(13.48e6, rel=1e-3)


def test_one_hour():
    est = upper_bound(1)
    assert est.hashes_per_day == 80 * 3600
    assert est.xmr_per_day == pytest.approx(1.656e-5, rel=1e-3)


def test_exact_formula_without_rounding():
    m = PayoutModel(hash_rate_hps=93.0, payout_xmr_per_mhash=0.0001, xmr_usd=300)
    est = revenue_from_core_hours(12.5, m)
    assert est.xmr_per_day == 12.5 * 3600 * 93.0 * 0.0001 / 1e6
    assert est.usd_per_day == est.xmr_per_day * 300


def test_linear_in_visits_and_duration():
    base = estimate_revenue(VisitStats("s", 1000, 60)).xmr_per_day
    assert estimate_revenue(VisitStats("s", 3000, 60)).xmr_per_day == pytest.approx(3 * base)
    assert estimate_revenue(VisitStats("s", 1000, 180)).xmr_per_day == pytest.approx(3 * base)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        PayoutModel(hash_rate_hps=0)
    with pytest.raises(ValueError):
        VisitStats("s", -1, 10)
    with pytest.raises(ValueError):
        upper_bound(0)
    with pytest.raises(ValueError):
        CpuBench("odd", 1, 10, 5)


def test_visit_stats_csv(tmp_path):
    path = tmp_path / "v.csv"
    path.write_text("site,visits_per_day,avg_duration_s\na.example,1300000,250\nb.example,10,1\n")
    stats = load_visit_stats(path)
    assert stats[0] == VisitStats("a.example", 1.3e6, 250.0)
    assert len(stats) == 2


def test_cpu_table_ships():
    rows = load_cpu_bench()
    assert len(rows) == 6
    assert rows[0].hps_core == 22.2 and rows[0].hps_cpu == 148.9
    assert all(r.hps_cpu >= r.hps_core for r in rows)


# ---------------------------------------------------------------- greediness

def test_throttle_recovered_up_to_090():
    for _, spec in grid():
        rec = synth_visit(spec)
        est = estimate_throttle(rec, phase2_verdict(rec))
        if spec.throttle <= 0.9:
            assert est.throttle_est == pytest.approx(spec.throttle, abs=0.05)
        else:
            assert est.cpu_consumption_pct >= 19.0 / 4 - 1e-9
            assert 4 * est.cpu_consumption_pct >= 19.0


def test_seventy_percent_miner():
    rec = synth_visit(ThrottleSpec(0.3))
    est = estimate_throttle(rec, phase2_verdict(rec))
    assert est.cpu_consumption_pct == pytest.approx(70.0, abs=0.1)
    assert est.throttle_est == pytest.approx(0.3, abs=0.01)
    assert not est.oversubscribed


def test_full_load():
    rec = synth_visit(ThrottleSpec(0.0))
    est = estimate_throttle(rec, phase2_verdict(rec))
    assert est.cpu_consumption_pct == pytest.approx(100.0, abs=0.1)
    assert est.throttle_est == pytest.approx(0.0, abs=0.01)


def test_oversubscription():
    from dataclasses import replace

    rec = replace(synth_visit(ThrottleSpec(0.0), cores=8), reported_cores=4)
    est = estimate_throttle(rec, phase2_verdict(rec))
    assert est.oversubscribed
    assert est.cpu_consumption_pct == pytest.approx(200.0, abs=0.5)
    assert est.throttle_est == 0.0
    assert greediness_bin(est.cpu_consumption_pct) == ">100"


def test_inactive_verdict_rejected():
    rec = synth_visit(ThrottleSpec(0.0))
    with pytest.raises(ValueError):
        estimate_throttle(rec, MinerVerdict(False))


@pytest.mark.parametrize("pct, label", [(0, "0-10"), (9.99, "0-10"), (10, "10-20"), (70.0, "70-80"),
                                        (99.9, "90-100"), (100, "90-100"), (100.5, ">100")])
def test_bins(pct, label):
    assert greediness_bin(pct) == label


def test_histogram_of_testbed_matches_grid():
    ests = []
    for _, spec in grid():
        rec = synth_visit(spec)
        ests.append(estimate_throttle(rec, phase2_verdict(rec)))
    hist = greediness_histogram(ests)
    assert sum(hist.values()) == 24
    expected = {b: 0 for b in GREEDINESS_BINS}
    for _, spec in grid():
        expected[greediness_bin(100 * spec.duty_cycle)] += 1
    assert hist == expected
    # throttles 0 and 0.1 in both variants
    assert hist["90-100"] == 4 and hist[">100"] == 0


def test_empty_histogram():
    assert greediness_histogram([]) == {b: 0 for b in GREEDINESS_BINS}
    assert len(GREEDINESS_BINS) == 11
