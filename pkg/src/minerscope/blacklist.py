"""Ad-block style URL filters and agreement statistics against our verdicts.

Supported syntax: ``||`` hostname anchor, ``|`` start/end anchors, ``*``
wildcard and the ``^`` separator class. Comments (``!``), list headers
(``[...]``), element-hiding rules (``##``, ``#@#``, ``#?#``), exception
rules (``@@``) and regex rules (``/.../``) are skipped and counted. ``$``
options are stripped: every rule applies to every collected URL.
"""
from __future__ import annotations

import csv
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping

from .telemetry import VisitRecord

_SEPARATOR = r"(?:[^\w\-.%]|$)"
_HOST_ANCHOR = r"^(?:[a-z][a-z0-9+.\-]*:)?//(?:[^/?#]*\.)?"


@dataclass(frozen=True)
class FilterRule:
    raw: str
    kind: str
    pattern: str
    regex: re.Pattern = field(compare=False, repr=False)


@dataclass
class ParseReport:
    rules: list[FilterRule] = field(default_factory=list)
    skipped: Counter = field(default_factory=Counter)
    malformed: list[tuple[int, str]] = field(default_factory=list)


def _translate(body: str) -> str:
    out = []
    for ch in body:
        if ch == "*":
            out.append(".*")
        elif ch == "^":
            out.append(_SEPARATOR)
        else:
            out.append(re.escape(ch))
    return "".join(out)


def compile_rule(line: str) -> FilterRule:
    raw = line
    body = line
    if "$" in body:
        body = body.split("$", 1)[0]
    if body.startswith("||"):
        kind, prefix, body = "domain_anchor", _HOST_ANCHOR, body[2:]
    elif body.startswith("|"):
        kind, prefix, body = "left_anchor", "^", body[1:]
    else:
        kind, prefix = "plain", ""
    suffix = ""
    if body.endswith("|"):
        body, suffix = body[:-1], "$"
        if kind == "plain":
            kind = "right_anchor"
    if not body.strip("*"):
        raise ValueError("rule matches everything")
    return FilterRule(raw, kind, body, re.compile(prefix + _translate(body) + suffix, re.IGNORECASE))


def parse_rules(text: str) -> ParseReport:
    report = ParseReport()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("!") or (line.startswith("[") and line.endswith("]")):
            report.skipped["comment"] += 1
        elif "##" in line or "#@#" in line or "#?#" in line or "#$#" in line:
            report.skipped["cosmetic"] += 1
        elif line.startswith("@@"):
            report.skipped["exception"] += 1
        elif len(line) > 2 and line.startswith("/") and line.endswith("/"):
            report.skipped["regex"] += 1
        else:
            if "$" in line:
                report.skipped["options_ignored"] += 1
            try:
                report.rules.append(compile_rule(line))
            except ValueError as exc:
                report.malformed.append((lineno, f"{line}: {exc}"))
    return report


def matches(rule: FilterRule, url: str) -> bool:
    return rule.regex.search(url) is not None


def record_urls(record: VisitRecord) -> set[str]:
    urls = {s.url for s in record.scripts if s.url != "inline"}
    urls.update(f.endpoint for f in record.ws_frames if f.endpoint)
    return urls


def detections(rules: Iterable[FilterRule], corpus: Iterable[VisitRecord]) -> set[str]:
    rules = list(rules)
    hits = set()
    for record in corpus:
        if record.site in hits:
            continue
        if any(matches(r, u) for u in record_urls(record) for r in rules):
            hits.add(record.site)
    return hits


@dataclass(frozen=True)
class Agreement:
    detections: int
    both: int
    only_they: int
    only_we: int


def agreement(ours: set[str], theirs: set[str]) -> Agreement:
    return Agreement(len(theirs), len(ours & theirs), len(theirs - ours), len(ours - theirs))


def compare(verdict_sites: Iterable[str], lists: Mapping[str, Iterable[FilterRule]],
            corpus: Iterable[VisitRecord]) -> dict[str, Agreement]:
    ours = set(verdict_sites)
    corpus = list(corpus)
    return {name: agreement(ours, detections(rules, corpus)) for name, rules in lists.items()}


def write_agreement_csv(results: Mapping[str, Agreement], fp: IO[str]) -> None:
    w = csv.writer(fp)
    w.writerow(["blacklist", "detections", "both", "only_they", "only_we"])
    for name, a in results.items():
        w.writerow([name, a.detections, a.both, a.only_they, a.only_we])
