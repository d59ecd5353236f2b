"""Command-line entry point: ``minerscope <verb> ...``."""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional

from . import __version__
from .config import Settings, dump_settings, load_settings

log = logging.getLogger("minerscope")


@contextlib.contextmanager
def _output(path: Optional[str]):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fp:
            yield fp


def _archive(path: str):
    from .telemetry import load_archive

    return load_archive(path)


def _lines(path: str) -> list[str]:
    with open(path) as fp:
        return [ln.strip() for ln in fp if ln.strip() and not ln.lstrip().startswith("#")]


# ---------------------------------------------------------------- verbs

def cmd_collect(args, settings: Settings) -> int:
    from .collector import CrawlConfig, crawl
    from .telemetry import save_archive

    urls, ranks = [], {}
    for line in _lines(args.urls):
        parts = line.split(",", 1)
        if len(parts) == 2 and parts[0].strip().isdigit():
            ranks[parts[1].strip()] = int(parts[0])
            urls.append(parts[1].strip())
        else:
            urls.append(line)
    cfg = CrawlConfig.for_phase(
        args.phase,
        load_timeout_ms=settings.crawl.load_timeout_ms,
        settle_extra_ms=settings.crawl.settle_extra_ms,
        reported_cores=args.cores or settings.crawl.reported_cores,
        parallel_sessions=args.parallel or settings.crawl.parallel_sessions,
        keep_sources=args.keep_sources,
    )
    result = crawl(urls, cfg, args.endpoint, ranks)
    n = save_archive(result.records, args.out)
    log.info("wrote %d records to %s (%d failed)", n, args.out, len(result.failures))
    return 0 if not result.failures else 3


def _flags_doc(record, settings: Settings) -> dict:
    from .profiler import phase1_flags

    f = phase1_flags(record, settings.phase1.load_pct, settings.phase1.workers)
    return {"site": record.site, "flags": {"high_load": f.high_load, "uses_wasm": f.uses_wasm,
                                           "many_workers": f.many_workers, "candidate": f.candidate}}


def _verdict_doc(record, settings: Settings) -> Optional[dict]:
    from .profiler import ProfileMissing, phase2_verdict

    try:
        v = phase2_verdict(record, settings.phase2.load_pct, settings.phase2.min_duration_ms)
    except ProfileMissing as exc:
        log.warning("%s", exc)
        return None
    top = v.top
    return {"site": record.site, "verdict": {
        "active": v.active,
        "function": top.attributed_function.function_name if top else None,
        "script_id": top.script_id if top else None,
        "load_pct": round(top.load_pct, 4) if top else None,
        "share_pct": round(top.share_pct, 4) if top else None,
        "script_url": v.responsible_script_url,
    }}


def _write_jsonl(docs, path: Optional[str]) -> None:
    with _output(path) as fp:
        for doc in docs:
            if doc is not None:
                fp.write(json.dumps(doc, sort_keys=True) + "\n")


def cmd_phase1(args, settings: Settings) -> int:
    _write_jsonl((_flags_doc(r, settings) for r in _archive(args.input)), args.out)
    return 0


def cmd_phase2(args, settings: Settings) -> int:
    _write_jsonl((_verdict_doc(r, settings) for r in _archive(args.input)), args.out)
    return 0


def cmd_analyze(args, settings: Settings) -> int:
    return (cmd_phase1 if args.phase == "phase1" else cmd_phase2)(args, settings)


def _active(records, settings: Settings):
    from .profiler import ProfileMissing, phase2_verdict

    for r in records:
        try:
            v = phase2_verdict(r, settings.phase2.load_pct, settings.phase2.min_duration_ms)
        except ProfileMissing:
            continue
        if v.active:
            yield r, v


def cmd_fingerprint(args, settings: Settings) -> int:
    from .fingerprint import apply_fingerprints, build_fingerprints, read_fingerprints, write_fingerprints

    if args.action == "build":
        miners = list(_active(_archive(args.input), settings))
        prints = build_fingerprints(miners, args.min_support or settings.fingerprint.min_support_fraction)
        with _output(args.out) as fp:
            write_fingerprints(prints, fp)
        log.info("%d fingerprints from %d miners", len(prints), len(miners))
    else:
        with open(args.prints) as fp:
            prints = read_fingerprints(fp)
        confirmed = _lines(args.confirmed) if args.confirmed else ()
        with _output(args.out) as fp:
            for site in sorted(apply_fingerprints(_archive(args.input), prints, confirmed)):
                fp.write(site + "\n")
    return 0


def cmd_detect(args, settings: Settings) -> int:
    from .report import run_pipeline

    result = run_pipeline(_archive(args.phase1), _archive(args.phase2), settings)
    doc = {
        "summary": result.summary(),
        "suspicious": sorted(result.suspicious),
        "active": sorted(result.active),
        "total": sorted(result.total),
        "missing_phase2": sorted(result.missing_phase2),
    }
    with _output(args.out) as fp:
        json.dump(doc, fp, indent=2)
        fp.write("\n")
    return 0


def cmd_wallets(args, settings: Settings) -> int:
    from .wallet import group_by_identity, scan_frames

    observations = []
    docs = []
    for r in _archive(args.input):
        found = scan_frames(r.ws_frames)
        docs.append({"site": r.site,
                     "wallets": [{"address": a.text, "currency": a.currency} for a in found.wallets],
                     "sitekeys": list(found.sitekeys), "pools": list(found.pools)})
        observations.extend((r.site, a.text) for a in found.wallets)
        observations.extend((r.site, k) for k in found.sitekeys)
    _write_jsonl(docs, args.out)
    if args.histogram:
        graph = group_by_identity(observations)
        with open(args.histogram, "w", newline="") as fp:
            w = csv.writer(fp)
            w.writerow(["sites_from", "sites_to", "identities"])
            for (lo, hi), n in graph.histogram(args.bin_size).items():
                w.writerow([lo, hi, n])
    return 0


def cmd_revenue(args, settings: Settings) -> int:
    from dataclasses import asdict, replace

    from .economics import VisitStats, estimate_revenue, load_visit_stats, revenue_from_core_hours, upper_bound

    model = settings.economics
    overrides = {k: v for k, v in (("hash_rate_hps", args.hps), ("payout_xmr_per_mhash", args.payout),
                                   ("xmr_usd", args.rate)) if v is not None}
    if overrides:
        model = replace(model, **overrides)
    rows = []
    if args.visits:
        for stats in load_visit_stats(args.visits):
            rows.append({"site": stats.site, **asdict(estimate_revenue(stats, model))})
    if args.site_visits is not None:
        rows.append({"site": "(given)", **asdict(estimate_revenue(VisitStats("(given)", args.site_visits,
                                                                             args.duration), model))})
    if args.core_hours is not None:
        rows.append({"site": "(core-hours)", **asdict(revenue_from_core_hours(args.core_hours, model))})
    if args.visitor_hours is not None:
        rows.append({"site": "(upper bound)", **asdict(upper_bound(args.visitor_hours, model))})
    if not rows:
        raise SystemExit("revenue: give --visits, --site-visits, --core-hours or --visitor-hours")
    with _output(args.out) as fp:
        w = csv.DictWriter(fp, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return 0


def cmd_cluster(args, settings: Settings) -> int:
    from .similarity import cluster, similarity_matrix, vectorize, wasm_tokens

    n = args.ngram or settings.similarity.ngram
    names, samples = [], []
    for r, v in _active(_archive(args.input), settings):
        if args.what == "wasm":
            if r.wasm_modules:
                names.append(r.site)
                samples.append(vectorize(wasm_tokens(b for m in r.wasm_modules for b in m.function_bodies), n))
            continue
        script = r.script(v.top.script_id) if v.top else None
        if script is None or script.source is None:
            log.warning("%s: responsible script source not archived", r.site)
            continue
        text = script.source if isinstance(script.source, str) else script.source.decode("utf-8", "replace")
        names.append(r.site)
        samples.append(vectorize(text, n))
    if not samples:
        raise SystemExit("cluster: no samples (were sources archived with --keep-sources?)")
    cut = args.cut if args.cut is not None else settings.similarity.cut
    res = cluster(samples, cut, settings.similarity.linkage)
    with _output(args.out) as fp:
        w = csv.writer(fp)
        w.writerow(["sample", "cluster"])
        for name, c in zip(names, res.assignments):
            w.writerow([name, c])
    if args.matrix:
        sim, order = similarity_matrix(samples, settings.similarity.linkage)
        with open(args.matrix, "w", newline="") as fp:
            w = csv.writer(fp)
            w.writerow([""] + [names[i] for i in order])
            for i, row in zip(order, sim):
                w.writerow([names[i]] + [f"{x:.6f}" for x in row])
    log.info("%d samples in %d clusters", len(samples), res.n_clusters)
    return 0


def cmd_blacklist(args, settings: Settings) -> int:
    from .blacklist import compare, parse_rules, write_agreement_csv

    lists = {}
    for spec in args.list:
        name, _, path = spec.partition("=")
        if not path:
            raise SystemExit(f"blacklist: expected NAME=PATH, got {spec!r}")
        report = parse_rules(Path(path).read_text(encoding="utf-8", errors="replace"))
        log.info("%s: %d rules, skipped %s", name, len(report.rules), dict(report.skipped))
        lists[name] = report.rules
    records = _archive(args.input)
    ours = _lines(args.verdicts) if args.verdicts else [r.site for r, _ in _active(records, settings)]
    with _output(args.out) as fp:
        write_agreement_csv(compare(ours, lists, records), fp)
    return 0


def cmd_report(args, settings: Settings) -> int:
    from .report import EnrichmentTables, load_categories, load_geo, rank_histogram, tabulate, write_table

    records = _archive(args.input)
    sites = _lines(args.sites) if args.sites else [r.site for r, _ in _active(records, settings)]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hist = rank_histogram(sites, records, args.bin_size)
    with open(out / "ranks.csv", "w", newline="") as fp:
        write_table(hist.items(), ("bin", "sites"), fp)
    tables = EnrichmentTables()
    if args.geo:
        with open(args.geo, newline="") as fp:
            tables.geo = load_geo(fp)
        with open(out / "countries.csv", "w", newline="") as fp:
            write_table(tabulate(tables.geo, sites, args.top), ("country", "sites"), fp)
    if args.categories:
        with open(args.categories, newline="") as fp:
            tables.categories = load_categories(fp)
        with open(out / "categories.csv", "w", newline="") as fp:
            write_table(tabulate(tables.categories, sites, args.top), ("category", "sites"), fp)
    tables.unknown_sites(r.site for r in records)
    return 0


def cmd_wasm(args, settings: Settings) -> int:
    import hashlib

    from .telemetry import WasmArtifact
    from .wasm import codebase_hash, parse_module

    artifacts = []
    for path in args.files:
        module = parse_module(Path(path).read_bytes())
        artifacts.append(WasmArtifact(path, module.function_bodies))
        if args.action == "dump":
            print(f"{path}: version {module.version}, {len(module.function_bodies)} functions, "
                  f"{module.custom_sections_skipped} custom sections")
            for i, body in enumerate(module.function_bodies):
                print(f"  {i:4d} {len(body):7d} bytes sha1={hashlib.sha1(body).hexdigest()}")
    if args.action == "hash":
        print(codebase_hash(artifacts).hex())
    return 0


def cmd_testbed(args, settings: Settings) -> int:
    from .telemetry import save_archive
    from .testbed import serve_pool, testbed_corpus

    if args.action == "generate":
        profile_ms = {1: 5_000, 2: 30_000}[args.phase]
        n = save_archive(testbed_corpus(profile_ms, args.benign_per_kind, args.cores), args.out)
        log.info("wrote %d records to %s", n, args.out)
        return 0
    server = serve_pool(args.host, args.port, args.target)
    print(f"pool listening on {server.url}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        server.stop()
    return 0


def cmd_config(args, settings: Settings) -> int:
    sys.stdout.write(dump_settings(settings))
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="minerscope", description="Find and measure in-browser cryptocurrency miners.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--config", help="threshold file (INI); defaults apply to anything it omits")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = verb("collect", cmd_collect, "visit URLs through DevTools endpoints and archive telemetry")
    sp.add_argument("--endpoint", action="append", required=True, help="page WebSocket debugger URL (repeatable)")
    sp.add_argument("--urls", required=True, help="file of URLs, one per line, optionally 'rank,url'")
    sp.add_argument("--phase", type=int, choices=(1, 2), default=1)
    sp.add_argument("--cores", type=int)
    sp.add_argument("--parallel", type=int)
    sp.add_argument("--keep-sources", action="store_true")
    sp.add_argument("--out", required=True)

    for name, fn, text in (("phase1", cmd_phase1, "flag candidates from short profiles"),
                           ("phase2", cmd_phase2, "validate miners from long profiles")):
        sp = verb(name, fn, text)
        sp.add_argument("--in", dest="input", required=True)
        sp.add_argument("--out")

    sp = verb("analyze", cmd_analyze, "phase-1 flags or phase-2 verdicts as JSON lines")
    sp.add_argument("phase", choices=("phase1", "phase2"))
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out")

    sp = verb("fingerprint", cmd_fingerprint, "build or apply static miner fingerprints")
    sp.add_argument("action", choices=("build", "apply"))
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--prints", help="fingerprint file (apply)")
    sp.add_argument("--confirmed", help="file of confirmed miner sites (apply)")
    sp.add_argument("--min-support", type=float)
    sp.add_argument("--out")

    sp = verb("detect", cmd_detect, "run all three phases")
    sp.add_argument("--phase1", required=True, help="archive with short profiles")
    sp.add_argument("--phase2", required=True, help="archive with long profiles")
    sp.add_argument("--out")

    sp = verb("wallets", cmd_wallets, "extract wallets, site-keys and pools from WebSocket frames")
    sp.add_argument("action", choices=("scan",))
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--histogram", help="write identities-per-site-count histogram CSV here")
    sp.add_argument("--bin-size", type=int, default=5)
    sp.add_argument("--out")

    sp = verb("revenue", cmd_revenue, "estimate mining revenue")
    sp.add_argument("--stats", "--visits", dest="visits", help="CSV with site,visits_per_day,avg_duration_s")
    sp.add_argument("--site-visits", type=float, help="visits per day for a single site")
    sp.add_argument("--duration", type=float, default=0.0, help="average visit duration in seconds")
    sp.add_argument("--core-hours", type=float)
    sp.add_argument("--visitor-hours", type=float, help="total daily visitor hours for an upper bound")
    sp.add_argument("--hps", type=float, help="hash rate per visitor CPU")
    sp.add_argument("--payout", type=float, help="XMR paid per million hashes")
    sp.add_argument("--rate", type=float, help="USD per XMR")
    sp.add_argument("--out")

    sp = verb("cluster", cmd_cluster, "cluster miner code by n-gram similarity")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--what", choices=("js", "wasm"), default="js")
    sp.add_argument("--ngram", type=int)
    sp.add_argument("--cut", type=float)
    sp.add_argument("--matrix", help="write the ordered similarity matrix CSV here")
    sp.add_argument("--out")

    sp = verb("blacklist", cmd_blacklist, "compare filter lists with our verdicts")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--list", action="append", required=True, help="NAME=PATH (repeatable)")
    sp.add_argument("--verdicts", help="file of miner sites; default: phase-2 verdicts of the archive")
    sp.add_argument("--out")

    sp = verb("report", cmd_report, "rank, country and category distributions")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--sites", help="file of miner sites; default: phase-2 verdicts of the archive")
    sp.add_argument("--geo", help="CSV site,country")
    sp.add_argument("--categories", help="CSV site,category")
    sp.add_argument("--bin-size", type=int, default=100_000)
    sp.add_argument("--top", type=int)
    sp.add_argument("--out-dir", required=True)

    sp = verb("wasm", cmd_wasm, "inspect WebAssembly binaries")
    sp.add_argument("action", choices=("hash", "dump"))
    sp.add_argument("files", nargs="+")

    sp = verb("testbed", cmd_testbed, "generate ground-truth corpora or run the mock pool")
    sp.add_argument("action", choices=("generate", "serve"))
    sp.add_argument("--phase", type=int, choices=(1, 2), default=2)
    sp.add_argument("--cores", type=int, default=4)
    sp.add_argument("--benign-per-kind", type=int, default=5)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8765)
    sp.add_argument("--target", default="ffffff00")
    sp.add_argument("--out")

    verb("config", cmd_config, "print the effective thresholds")
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    settings = load_settings(args.config)
    if args.verb == "testbed" and args.action == "generate" and not args.out:
        raise SystemExit("testbed generate: --out is required")
    return args.func(args, settings)


if __name__ == "__main__":
    sys.exit(main())
