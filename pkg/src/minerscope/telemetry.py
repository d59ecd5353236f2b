"""Visit telemetry data model and the line-delimited archive codec.

A corpus is a file of JSON documents, one :class:`VisitRecord` per line.
Records are immutable; every container field is a tuple.
"""
from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import IO, Iterable, Iterator, Optional, Union

# Profiler marker for Wasm frames; function name and script id of a Wasm leaf.
WASM_FUNCTION = "<WASM UNNAMED>"
WASM_SCRIPT = "<wasm>"

CRAWL_TIMEOUT_MS = 30_000
LOAD_GRACE_MS = 3_000

Payload = Union[str, bytes]


class TelemetryError(ValueError):
    """Raised for malformed documents and invariant violations.

    ``path`` names the offending field, e.g. ``scripts[2].source_hash``.
    """

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


def digest(source: Payload) -> str:
    if isinstance(source, str):
        try:
            source = source.encode("utf-8")
        except UnicodeEncodeError as exc:
            raise TelemetryError("source", "text is not UTF-8 encodable; store it as raw bytes") from exc
    return hashlib.sha256(source).hexdigest()


@dataclass(frozen=True)
class ScriptArtifact:
    script_id: str
    url: str
    source_hash: str
    source: Optional[Payload] = None
    context: str = "main_page"

    @classmethod
    def from_source(cls, script_id: str, url: str, source: Payload, context: str = "main_page",
                    keep_source: bool = True) -> "ScriptArtifact":
        return cls(script_id, url, digest(source), source if keep_source else None, context)


@dataclass(frozen=True)
class WasmArtifact:
    origin_script_id: str
    function_bodies: tuple[bytes, ...]


@dataclass(frozen=True)
class FrameRef:
    function_name: str
    script_id: str = ""

    @property
    def is_wasm(self) -> bool:
        return self.script_id == WASM_SCRIPT or self.function_name == WASM_FUNCTION


WASM_FRAME = FrameRef(WASM_FUNCTION, WASM_SCRIPT)


@dataclass(frozen=True)
class StackAggregate:
    frames: tuple[FrameRef, ...]  # leaf first
    sample_count: int
    total_ms: float


@dataclass(frozen=True)
class ProfileTrace:
    duration_ms: float
    stacks: tuple[StackAggregate, ...] = ()


@dataclass(frozen=True)
class WsFrame:
    endpoint: str
    direction: str
    payload: Payload
    at_ms: float


@dataclass(frozen=True)
class VisitRecord:
    site: str
    visited_at: datetime
    load_ms: float
    rank: Optional[int] = None
    scripts: tuple[ScriptArtifact, ...] = ()
    wasm_modules: tuple[WasmArtifact, ...] = ()
    profile: Optional[ProfileTrace] = None
    ws_frames: tuple[WsFrame, ...] = ()
    worker_count: int = 0
    reported_cores: int = 4
    partial: bool = False
    attach_failures: tuple[str, ...] = ()
    label: Optional[str] = None

    def script(self, script_id: str) -> Optional[ScriptArtifact]:
        for s in self.scripts:
            if s.script_id == script_id:
                return s
        return None

    @property
    def thread_budget(self) -> int:
        """Upper bound on concurrently busy threads: the reported cores, or main thread plus workers."""
        return max(self.reported_cores, self.worker_count + 1)


# ---------------------------------------------------------------- validation

def _check(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise TelemetryError(path, message)


def validate(record: VisitRecord) -> VisitRecord:
    """Check every record invariant; returns the record unchanged."""
    _check(bool(record.site), "site", "must be a non-empty hostname")
    _check(record.rank is None or record.rank >= 1, "rank", "must be a positive integer")
    _check(record.visited_at.tzinfo is not None, "visited_at", "must be timezone-aware")
    _check(record.load_ms >= 0, "load_ms", "must be non-negative")
    _check(record.load_ms <= CRAWL_TIMEOUT_MS + LOAD_GRACE_MS, "load_ms",
           f"exceeds crawl timeout of {CRAWL_TIMEOUT_MS} ms plus grace")
    _check(record.worker_count >= 0, "worker_count", "must be >= 0")
    _check(record.reported_cores >= 1, "reported_cores", "must be >= 1")

    ids = set()
    for i, s in enumerate(record.scripts):
        p = f"scripts[{i}]"
        _check(bool(s.script_id), f"{p}.script_id", "must be non-empty")
        _check(s.script_id not in ids, f"{p}.script_id", f"duplicate id {s.script_id!r}")
        ids.add(s.script_id)
        _check(s.context in ("main_page", "worker"), f"{p}.context", f"unknown context {s.context!r}")
        _check(len(s.source_hash) == 64 and s.source_hash == s.source_hash.lower(),
               f"{p}.source_hash", "must be a lowercase hex SHA-256 digest")
        if s.source is not None:
            try:
                actual = digest(s.source)
            except TelemetryError as exc:
                raise TelemetryError(f"{p}.source", exc.message) from None
            _check(actual == s.source_hash, f"{p}.source_hash", "does not match digest of source")

    for i, w in enumerate(record.wasm_modules):
        _check(len(w.function_bodies) > 0, f"wasm_modules[{i}].function_bodies", "must be non-empty")

    if record.profile is not None:
        prof = record.profile
        _check(prof.duration_ms > 0, "profile.duration_ms", "must be positive")
        total = 0.0
        for i, st in enumerate(prof.stacks):
            p = f"profile.stacks[{i}]"
            _check(len(st.frames) > 0, f"{p}.frames", "must be non-empty")
            _check(st.sample_count >= 0, f"{p}.sample_count", "must be >= 0")
            _check(st.total_ms >= 0, f"{p}.total_ms", "must be >= 0")
            _check((st.total_ms == 0) == (st.sample_count == 0), p,
                   "total_ms must be zero exactly when sample_count is zero")
            for j, fr in enumerate(st.frames):
                if fr.script_id and fr.script_id != WASM_SCRIPT:
                    _check(fr.script_id in ids, f"{p}.frames[{j}].script_id",
                           f"references unknown script {fr.script_id!r}")
            total += st.total_ms
        bound = prof.duration_ms * record.thread_budget
        _check(total <= bound * (1 + 1e-9), "profile.stacks",
               f"aggregate time {total:.1f} ms exceeds {bound:.1f} ms thread budget")

    for i, f in enumerate(record.ws_frames):
        _check(f.direction in ("sent", "received"), f"ws_frames[{i}].direction", f"unknown direction {f.direction!r}")
        _check(f.at_ms >= 0, f"ws_frames[{i}].at_ms", "must be >= 0")
    return record


# ---------------------------------------------------------------- codec

def _payload_out(value: Payload, path: str):
    if isinstance(value, bytes):
        return {"b64": base64.b64encode(value).decode("ascii")}
    try:
        value.encode("utf-8")
    except UnicodeEncodeError:
        raise TelemetryError(path, "text is not UTF-8 encodable; store it as raw bytes") from None
    return value


def _payload_in(value, path: str) -> Payload:
    if isinstance(value, str):
        return value
    if isinstance(value, dict) and isinstance(value.get("b64"), str):
        return base64.b64decode(value["b64"])
    raise TelemetryError(path, "expected text or {\"b64\": ...}")


def _timestamp(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def to_document(record: VisitRecord) -> dict:
    validate(record)
    doc = {
        "site": record.site,
        "rank": record.rank,
        "visited_at": _timestamp(record.visited_at),
        "load_ms": record.load_ms,
        "scripts": [
            {
                "script_id": s.script_id,
                "url": s.url,
                "source_hash": s.source_hash,
                "source": None if s.source is None else _payload_out(s.source, f"scripts[{i}].source"),
                "context": s.context,
            }
            for i, s in enumerate(record.scripts)
        ],
        "wasm_modules": [
            {
                "origin_script_id": w.origin_script_id,
                "function_bodies": [base64.b64encode(b).decode("ascii") for b in w.function_bodies],
            }
            for w in record.wasm_modules
        ],
        "profile": None,
        "ws_frames": [
            {
                "endpoint": f.endpoint,
                "direction": f.direction,
                "payload": _payload_out(f.payload, f"ws_frames[{i}].payload"),
                "at_ms": f.at_ms,
            }
            for i, f in enumerate(record.ws_frames)
        ],
        "worker_count": record.worker_count,
        "reported_cores": record.reported_cores,
    }
    if record.profile is not None:
        doc["profile"] = {
            "duration_ms": record.profile.duration_ms,
            "stacks": [
                {
                    "frames": [{"function_name": fr.function_name, "script_id": fr.script_id} for fr in st.frames],
                    "sample_count": st.sample_count,
                    "total_ms": st.total_ms,
                }
                for st in record.profile.stacks
            ],
        }
    if record.partial:
        doc["partial"] = True
    if record.attach_failures:
        doc["attach_failures"] = list(record.attach_failures)
    if record.label is not None:
        doc["label"] = record.label
    return doc


def encode_visit(record: VisitRecord) -> bytes:
    """Serialize one record as a single newline-free UTF-8 line (no trailing newline)."""
    return json.dumps(to_document(record), ensure_ascii=False, separators=(",", ":")).encode("utf-8")


class _Reader:
    """Field access on a decoded document that reports the full field path on failure."""

    def __init__(self, doc, path: str = ""):
        if not isinstance(doc, dict):
            raise TelemetryError(path or "<root>", "expected an object")
        self.doc = doc
        self.path = path

    def _p(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def get(self, key: str, kind, required: bool = True, default=None):
        if key not in self.doc or self.doc[key] is None:
            if required:
                raise TelemetryError(self._p(key), "missing required field")
            return default
        value = self.doc[key]
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
            raise TelemetryError(self._p(key), f"expected {getattr(kind, '__name__', kind)}")
        return value

    def items(self, key: str, required: bool = True):
        values = self.get(key, list, required=required, default=[])
        return [(f"{self._p(key)}[{i}]", v) for i, v in enumerate(values)]


def from_document(doc) -> VisitRecord:
    r = _Reader(doc)
    raw_ts = r.get("visited_at", str)
    try:
        visited_at = datetime.fromisoformat(raw_ts.replace("Z", "+00:00"))
    except ValueError:
        raise TelemetryError("visited_at", "not an RFC 3339 timestamp") from None

    scripts = []
    for p, item in r.items("scripts"):
        s = _Reader(item, p)
        src = s.doc.get("source")
        scripts.append(ScriptArtifact(
            script_id=s.get("script_id", str),
            url=s.get("url", str),
            source_hash=s.get("source_hash", str),
            source=None if src is None else _payload_in(src, f"{p}.source"),
            context=s.get("context", str),
        ))

    wasm = []
    for p, item in r.items("wasm_modules", required=False):
        w = _Reader(item, p)
        bodies = tuple(base64.b64decode(b) for _, b in w.items("function_bodies"))
        wasm.append(WasmArtifact(w.get("origin_script_id", str), bodies))

    profile = None
    if r.doc.get("profile") is not None:
        pr = _Reader(r.doc["profile"], "profile")
        stacks = []
        for p, item in pr.items("stacks"):
            st = _Reader(item, p)
            frames = []
            for fp, fitem in st.items("frames"):
                fr = _Reader(fitem, fp)
                frames.append(FrameRef(fr.get("function_name", str), fr.get("script_id", str, required=False, default="")))
            stacks.append(StackAggregate(tuple(frames), st.get("sample_count", int), st.get("total_ms", float)))
        profile = ProfileTrace(pr.get("duration_ms", float), tuple(stacks))

    frames = []
    for p, item in r.items("ws_frames", required=False):
        f = _Reader(item, p)
        if "payload" not in f.doc:
            raise TelemetryError(f"{p}.payload", "missing required field")
        frames.append(WsFrame(f.get("endpoint", str), f.get("direction", str),
                              _payload_in(f.doc["payload"], f"{p}.payload"), f.get("at_ms", float)))

    record = VisitRecord(
        site=r.get("site", str),
        rank=r.get("rank", int, required=False),
        visited_at=visited_at,
        load_ms=r.get("load_ms", float),
        scripts=tuple(scripts),
        wasm_modules=tuple(wasm),
        profile=profile,
        ws_frames=tuple(frames),
        worker_count=r.get("worker_count", int),
        reported_cores=r.get("reported_cores", int),
        partial=r.get("partial", bool, required=False, default=False),
        attach_failures=tuple(r.get("attach_failures", list, required=False, default=[])),
        label=r.get("label", str, required=False),
    )
    return validate(record)


def decode_visit(line: Union[bytes, str]) -> VisitRecord:
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError:
            raise TelemetryError("<root>", "line is not UTF-8") from None
    try:
        doc = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TelemetryError("<root>", f"malformed document: {exc.msg}") from None
    return from_document(doc)


# ---------------------------------------------------------------- archives

def write_archive(records: Iterable[VisitRecord], fp: IO[bytes]) -> int:
    n = 0
    for rec in records:
        fp.write(encode_visit(rec) + b"\n")
        n += 1
    return n


def iter_archive(fp: IO[bytes]) -> Iterator[VisitRecord]:
    for lineno, line in enumerate(fp, 1):
        if not line.strip():
            continue
        try:
            yield decode_visit(line)
        except TelemetryError as exc:
            raise TelemetryError(f"line {lineno}: {exc.path}", exc.message) from None


def load_archive(path) -> list[VisitRecord]:
    with open(path, "rb") as fp:
        return list(iter_archive(fp))


def save_archive(records: Iterable[VisitRecord], path) -> int:
    with open(path, "wb") as fp:
        return write_archive(records, fp)
