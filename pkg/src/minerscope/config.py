"""Analysis thresholds, overridable from an INI-style text file.

Example::

    [phase1]
    load_pct = 5
    workers = 3

    [phase2]
    load_pct = 10

Unknown sections or keys are rejected so typos do not silently fall back to
defaults.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from typing import Optional

from .economics import PayoutModel


@dataclass(frozen=True)
class Phase1Settings:
    load_pct: float = 5.0
    workers: int = 3


@dataclass(frozen=True)
class Phase2Settings:
    load_pct: float = 10.0
    min_duration_ms: float = 30_000


@dataclass(frozen=True)
class FingerprintSettings:
    min_support_fraction: float = 0.01


@dataclass(frozen=True)
class SimilaritySettings:
    ngram: int = 3
    cut: float = 0.7
    linkage: str = "average"


@dataclass(frozen=True)
class CrawlSettings:
    load_timeout_ms: float = 30_000
    settle_extra_ms: float = 3_000
    reported_cores: int = 4
    parallel_sessions: int = 1


@dataclass(frozen=True)
class Settings:
    phase1: Phase1Settings = field(default_factory=Phase1Settings)
    phase2: Phase2Settings = field(default_factory=Phase2Settings)
    fingerprint: FingerprintSettings = field(default_factory=FingerprintSettings)
    similarity: SimilaritySettings = field(default_factory=SimilaritySettings)
    crawl: CrawlSettings = field(default_factory=CrawlSettings)
    economics: PayoutModel = field(default_factory=PayoutModel)


def _coerce(section: str, key: str, raw: str, like):
    try:
        if isinstance(like, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return type(like)(raw.strip())
    except ValueError:
        raise ValueError(f"[{section}] {key}: cannot read {raw!r} as {type(like).__name__}") from None


def parse_settings(text: str, base: Optional[Settings] = None) -> Settings:
    parser = configparser.ConfigParser()
    parser.read_string(text)
    settings = base or Settings()
    for section in parser.sections():
        if section not in {f.name for f in fields(Settings)}:
            raise ValueError(f"unknown config section [{section}]")
        current = getattr(settings, section)
        known = {f.name for f in fields(current)}
        updates = {}
        for key, raw in parser.items(section):
            if key not in known:
                raise ValueError(f"[{section}] unknown key {key!r}")
            updates[key] = _coerce(section, key, raw, getattr(current, key))
        settings = replace(settings, **{section: replace(current, **updates)})
    return settings


def load_settings(path: Optional[str] = None) -> Settings:
    if path is None:
        return Settings()
    with open(path) as fp:
        return parse_settings(fp.read())


def dump_settings(settings: Settings) -> str:
    lines = []
    for section in fields(Settings):
        lines.append(f"[{section.name}]")
        value = getattr(settings, section.name)
        lines.extend(f"{f.name} = {getattr(value, f.name)}" for f in fields(value))
        lines.append("")
    return "\n".join(lines)
