import csv
import json

import pytest

from minerscope.cli import main
from minerscope.collector import CrawlConfig
from minerscope.mockcdp import MockBrowser, miner_scenario
from minerscope.telemetry import WasmArtifact, load_archive
from minerscope.testbed import wasm_bodies
from minerscope.wasm import build_module, codebase_hash


@pytest.fixture(scope="module")
def archives(tmp_path_factory):
    d = tmp_path_factory.mktemp("archives")
    short, long = d / "p1.jsonl", d / "p2.jsonl"
    assert main(["testbed", "generate", "--phase", "1", "--benign-per-kind", "2", "--out", str(short)]) == 0
    assert main(["testbed", "generate", "--phase", "2", "--benign-per-kind", "2", "--out", str(long)]) == 0
    return short, long


def jsonl(text):
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def test_generate_writes_full_grid(archives):
    assert len(load_archive(archives[1])) == 24 + 4 * 2


def test_phase1(archives, capsys):
    main(["phase1", "--in", str(archives[0])])
    docs = jsonl(capsys.readouterr().out)
    miners = [d for d in docs if d["site"].endswith(".testbed.local")]
    assert len(miners) == 24
    assert all(d["flags"]["uses_wasm"] for d in miners)


def test_analyze_phase2(archives, capsys):
    main(["analyze", "phase2", "--in", str(archives[1])])
    docs = {d["site"]: d["verdict"] for d in jsonl(capsys.readouterr().out)}
    active = {s for s, v in docs.items() if v and v["active"]}
    assert len(active) == 24 and all(s.endswith(".testbed.local") for s in active)
    sample = docs["coinhive-t50.testbed.local"]
    assert sample["load_pct"] >= 10 and sample["script_url"].endswith("coinhive.min.js")


def test_detect(archives, tmp_path):
    out = tmp_path / "detect.json"
    main(["detect", "--phase1", str(archives[0]), "--phase2", str(archives[1]), "--out", str(out)])
    doc = json.loads(out.read_text())
    assert doc["summary"]["active"] == 24 and doc["summary"]["total"] == 24
    assert doc["summary"]["suspicious"] >= 24


def test_fingerprint_build_and_apply(archives, tmp_path, capsys):
    prints = tmp_path / "prints.jsonl"
    main(["fingerprint", "build", "--in", str(archives[1]), "--out", str(prints)])
    kinds = {json.loads(line)["kind"] for line in prints.read_text().splitlines()}
    assert {"script_url", "wasm_codebase_hash"} <= kinds
    confirmed = tmp_path / "confirmed.txt"
    confirmed.write_text("extra.example\n")
    main(["fingerprint", "apply", "--in", str(archives[0]), "--prints", str(prints), "--confirmed", str(confirmed)])
    sites = capsys.readouterr().out.split()
    assert "extra.example" in sites
    assert sum(s.endswith(".testbed.local") for s in sites) == 24


def test_wallets_scan(archives, tmp_path, capsys):
    hist = tmp_path / "hist.csv"
    main(["wallets", "scan", "--in", str(archives[1]), "--histogram", str(hist)])
    docs = jsonl(capsys.readouterr().out)
    keyed = [d for d in docs if d["sitekeys"]]
    assert len(keyed) == 24
    assert all("testbed.local" in d["pools"] for d in keyed)
    rows = list(csv.reader(hist.open()))
    assert rows[0] == ["sites_from", "sites_to", "identities"]


def test_revenue(tmp_path, capsys):
    stats = tmp_path / "stats.csv"
    stats.write_text("site,visits_per_day,avg_duration_s\nbig.example,1300000,250\n")
    main(["revenue", "--stats", str(stats), "--core-hours", "1550", "--visitor-hours", "13.5e6"])
    rows = {r["site"]: r for r in csv.DictReader(capsys.readouterr().out.splitlines())}
    assert float(rows["big.example"]["xmr_per_day"]) == pytest.approx(1.49, abs=0.01)
    assert float(rows["(core-hours)"]["usd_per_day"]) == pytest.approx(5.77, abs=0.01)
    assert float(rows["(upper bound)"]["xmr_per_day"]) == pytest.approx(223.5, abs=0.1)


def test_revenue_requires_input():
    with pytest.raises(SystemExit):
        main(["revenue"])


def test_cluster(archives, tmp_path, capsys):
    matrix = tmp_path / "m.csv"
    main(["cluster", "--in", str(archives[1]), "--what", "js", "--matrix", str(matrix)])
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert len(rows) == 24
    by_variant = {}
    for r in rows:
        by_variant.setdefault(r["sample"].split("-")[0], set()).add(r["cluster"])
    assert all(len(c) == 1 for c in by_variant.values())
    assert len(list(csv.reader(matrix.open()))) == 25
    main(["cluster", "--in", str(archives[1]), "--what", "wasm"])
    assert len(list(csv.DictReader(capsys.readouterr().out.splitlines()))) == 24


def test_blacklist(archives, tmp_path, capsys):
    nocoin = tmp_path / "nocoin.txt"
    nocoin.write_text("! list\n||testbed.local^\n")
    empty = tmp_path / "empty.txt"
    empty.write_text("||nothing.invalid^\n")
    main(["blacklist", "--in", str(archives[1]), "--list", f"nocoin={nocoin}", "--list", f"empty={empty}"])
    rows = {r["blacklist"]: r for r in csv.DictReader(capsys.readouterr().out.splitlines())}
    assert rows["nocoin"] == {"blacklist": "nocoin", "detections": "24", "both": "24", "only_they": "0", "only_we": "0"}
    assert rows["empty"]["only_we"] == "24"


def test_report(archives, tmp_path):
    geo = tmp_path / "geo.csv"
    geo.write_text("site,country\ncoinhive-t00.testbed.local,US\ncryptoloot-t00.testbed.local,US\n"
                   "coinhive-t10.testbed.local,RU\n")
    cats = tmp_path / "cats.csv"
    cats.write_text("site,category\ncoinhive-t00.testbed.local,Adult;Streaming\n")
    out = tmp_path / "out"
    main(["report", "--in", str(archives[1]), "--geo", str(geo), "--categories", str(cats), "--out-dir", str(out)])
    assert list(csv.reader((out / "countries.csv").open())) == [["country", "sites"], ["US", "2"], ["RU", "1"]]
    assert list(csv.reader((out / "categories.csv").open()))[1:] == [["Adult", "1"], ["Streaming", "1"]]
    ranks = list(csv.reader((out / "ranks.csv").open()))
    assert ranks[0] == ["bin", "sites"] and sum(int(n) for _, n in ranks[1:]) == 24


def test_wasm_verbs(tmp_path, capsys):
    a, b = tmp_path / "a.wasm", tmp_path / "b.wasm"
    bodies = wasm_bodies(b"coinhive", 4)
    a.write_bytes(build_module(bodies[:2]))
    b.write_bytes(build_module(bodies[2:]))
    main(["wasm", "hash", str(a), str(b)])
    assert capsys.readouterr().out.strip() == codebase_hash([WasmArtifact("x", bodies)]).hex()
    main(["wasm", "dump", str(a)])
    assert "functions" in capsys.readouterr().out


def test_config_verb(tmp_path, capsys):
    cfg = tmp_path / "t.ini"
    cfg.write_text("[phase2]\nload_pct = 15\n")
    main(["--config", str(cfg), "config"])
    out = capsys.readouterr().out
    assert "[phase2]\nload_pct = 15.0" in out


def test_collect_against_mock(tmp_path, monkeypatch):
    urls = tmp_path / "urls.txt"
    urls.write_text("# sites\n12,https://miner.example/\nhttps://other.example/\n")
    out = tmp_path / "visits.jsonl"
    cfg = tmp_path / "fast.ini"
    cfg.write_text("[crawl]\nload_timeout_ms = 500\nsettle_extra_ms = 100\n")
    original = CrawlConfig.for_phase
    monkeypatch.setattr(CrawlConfig, "for_phase",
                        staticmethod(lambda phase, **kw: original(phase, time_scale=0.01, **kw)))
    with MockBrowser(miner_scenario(workers=2)) as b:
        assert main(["--config", str(cfg), "collect", "--endpoint", b.url, "--urls", str(urls),
                     "--phase", "1", "--cores", "8", "--out", str(out)]) == 0
    records = load_archive(out)
    assert [(r.site, r.rank, r.reported_cores) for r in records] == [
        ("miner.example", 12, 8), ("other.example", None, 8)]


def test_unknown_verb():
    with pytest.raises(SystemExit):
        main(["frobnicate"])
