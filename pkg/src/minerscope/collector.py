"""Visit pages through a DevTools-protocol endpoint and record their telemetry.

The collector speaks the flattened-session dialect of the protocol over one
WebSocket per browser page: worker targets are auto-attached and addressed
by ``sessionId`` on the same socket.
"""
from __future__ import annotations

import asyncio
import base64
import itertools
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Callable, Iterable, Optional, Sequence, Union
from urllib.parse import urlsplit

from .telemetry import (
    CRAWL_TIMEOUT_MS,
    LOAD_GRACE_MS,
    WASM_FRAME,
    FrameRef,
    ProfileTrace,
    ScriptArtifact,
    StackAggregate,
    VisitRecord,
    WasmArtifact,
    WsFrame,
)
from .wasm import WasmError, parse_module

log = logging.getLogger(__name__)

PHASE_PROFILE_MS = {1: 5_000, 2: 30_000}
TRACE_CATEGORIES = [
    "disabled-by-default-v8.cpu_profiler",
    "disabled-by-default-v8.cpu_profiler.hires",
]
WORKER_TYPES = {"worker", "shared_worker", "service_worker"}
META_FUNCTIONS = {"(root)", "(program)", "(idle)", "(garbage collector)"}
COMMAND_TIMEOUT_S = 30.0


@dataclass(frozen=True)
class CrawlConfig:
    load_timeout_ms: float = 30_000
    settle_extra_ms: float = 3_000
    profile_ms: float = 5_000
    reported_cores: int = 4
    parallel_sessions: int = 1
    keep_sources: bool = False
    # multiplies every wait; recorded durations stay nominal
    time_scale: float = 1.0

    def __post_init__(self):
        if self.profile_ms <= 0:
            raise ValueError("profile_ms must be positive")
        if self.reported_cores < 1:
            raise ValueError("reported_cores must be >= 1")
        if self.parallel_sessions < 1:
            raise ValueError("parallel_sessions must be >= 1")

    @classmethod
    def for_phase(cls, phase: int, **overrides) -> "CrawlConfig":
        return cls(profile_ms=PHASE_PROFILE_MS[phase], **overrides)

    def seconds(self, ms: float) -> float:
        return ms * self.time_scale / 1000.0


def inject_core_override(cores: int) -> str:
    """Page-world script that pins ``navigator.hardwareConcurrency`` to ``cores``.

    Works in windows and workers and can be evaluated any number of times.
    """
    if int(cores) != cores or cores < 1:
        raise ValueError("cores must be a positive integer")
    return (
        "(function () {\n"
        f"  var cores = {int(cores)};\n"
        "  var getter = function () { return cores; };\n"
        "  var targets = [];\n"
        "  if (typeof Navigator !== 'undefined') targets.push(Navigator.prototype);\n"
        "  if (typeof WorkerNavigator !== 'undefined') targets.push(WorkerNavigator.prototype);\n"
        "  if (typeof navigator !== 'undefined') targets.push(navigator);\n"
        "  targets.forEach(function (t) {\n"
        "    try {\n"
        "      Object.defineProperty(t, 'hardwareConcurrency', { get: getter, configurable: true });\n"
        "    } catch (e) {}\n"
        "  });\n"
        "})();\n"
    )


# ---------------------------------------------------------------- trace conversion

def _frame(call_frame: dict, resolve: Callable[[str, str], str]) -> FrameRef:
    name = call_frame.get("functionName") or "(anonymous)"
    url = call_frame.get("url") or ""
    if name == WASM_FRAME.function_name or url.startswith("wasm://") or call_frame.get("codeType") == "wasm":
        return WASM_FRAME
    return FrameRef(name, resolve(str(call_frame.get("scriptId", "")), url))


def _no_scripts(raw_id: str, url: str) -> str:
    return ""


def stacks_from_trace(events: Iterable[dict], resolve: Callable[[str, str], str] = _no_scripts,
                      time_scale: float = 1.0) -> tuple[StackAggregate, ...]:
    """Aggregate sampled call stacks of every profiled thread, leaf frame first.

    Each sample is charged the interval until the next sample of its thread
    (the last one the preceding interval), divided by ``time_scale``. Idle,
    program and GC samples are dropped, as are non-positive intervals.
    Consecutive Wasm frames collapse into one marker frame.
    """
    starts: dict[tuple, float] = {}
    nodes: dict[tuple, dict[int, dict]] = defaultdict(dict)
    samples: dict[tuple, list[int]] = defaultdict(list)
    deltas: dict[tuple, list[float]] = defaultdict(list)
    for ev in events:
        name = ev.get("name")
        if name not in ("Profile", "ProfileChunk"):
            continue
        key = (ev.get("pid"), ev.get("id"))
        data = (ev.get("args") or {}).get("data") or {}
        if name == "Profile":
            starts[key] = float(data.get("startTime", 0))
            continue
        profile = data.get("cpuProfile") or {}
        for node in profile.get("nodes") or ():
            nodes[key][node["id"]] = node
        chunk_samples = list(profile.get("samples") or ())
        chunk_deltas = [float(d) for d in data.get("timeDeltas") or ()]
        n = min(len(chunk_samples), len(chunk_deltas))
        samples[key].extend(chunk_samples[:n])
        deltas[key].extend(chunk_deltas[:n])

    agg: dict[tuple[FrameRef, ...], list] = {}
    for key, ids in samples.items():
        tree = nodes[key]
        parent = {n["id"]: n["parent"] for n in tree.values() if "parent" in n}
        for n in tree.values():
            for child in n.get("children", ()):
                parent.setdefault(child, n["id"])

        stacks: dict[int, tuple[FrameRef, ...]] = {}

        def stack_of(node_id: int) -> tuple[FrameRef, ...]:
            if node_id not in stacks:
                frames: list[FrameRef] = []
                leaf = tree.get(node_id)
                if leaf is not None and leaf["callFrame"].get("functionName") not in META_FUNCTIONS:
                    cur: Optional[int] = node_id
                    while cur is not None and cur in tree:
                        cf = tree[cur]["callFrame"]
                        if cf.get("functionName") != "(root)":
                            fr = _frame(cf, resolve)
                            if not (fr == WASM_FRAME and frames and frames[-1] == WASM_FRAME):
                                frames.append(fr)
                        cur = parent.get(cur)
                stacks[node_id] = tuple(frames)
            return stacks[node_id]

        stamps = list(itertools.accumulate(deltas[key], initial=starts.get(key, 0.0)))[1:]
        for i, node_id in enumerate(ids):
            if i + 1 < len(stamps):
                dur = stamps[i + 1] - stamps[i]
            elif i > 0:
                dur = stamps[i] - stamps[i - 1]
            else:
                continue
            frames = stack_of(node_id)
            if dur <= 0 or not frames:
                continue
            slot = agg.setdefault(frames, [0, 0.0])
            slot[0] += 1
            slot[1] += dur / 1000.0 / time_scale
    return tuple(StackAggregate(frames, n, ms) for frames, (n, ms) in agg.items())


# ---------------------------------------------------------------- protocol client

class CdpError(RuntimeError):
    """Protocol error reply, or loss of the endpoint connection."""


class CdpConnection:
    """Request/response multiplexer over one DevTools WebSocket."""

    def __init__(self, ws):
        self._ws = ws
        self._ids = itertools.count(1)
        self._pending: dict[int, asyncio.Future] = {}
        self._listeners: list[Callable[[str, dict, Optional[str]], None]] = []
        self._closed: Optional[str] = None
        self._reader = asyncio.create_task(self._read())

    @classmethod
    async def open(cls, url: str) -> "CdpConnection":
        from websockets.asyncio.client import connect

        try:
            ws = await connect(url, max_size=None, open_timeout=10)
        except (OSError, asyncio.TimeoutError) as exc:
            raise CdpError(f"cannot connect to {url}: {exc}") from exc
        except Exception as exc:  # handshake rejections
            raise CdpError(f"cannot connect to {url}: {exc}") from exc
        return cls(ws)

    def on_event(self, callback: Callable[[str, dict, Optional[str]], None]) -> None:
        self._listeners.append(callback)

    async def _read(self) -> None:
        from websockets.exceptions import ConnectionClosed

        try:
            async for raw in self._ws:
                msg = json.loads(raw)
                if "id" in msg:
                    fut = self._pending.pop(msg["id"], None)
                    if fut is None or fut.done():
                        continue
                    if "error" in msg:
                        err = msg["error"]
                        fut.set_exception(CdpError(f"{err.get('message', 'error')} ({err.get('code')})"))
                    else:
                        fut.set_result(msg.get("result") or {})
                elif "method" in msg:
                    for cb in list(self._listeners):
                        try:
                            cb(msg["method"], msg.get("params") or {}, msg.get("sessionId"))
                        except Exception:
                            log.exception("event handler failed for %s", msg["method"])
            self._closed = "endpoint closed the connection"
        except ConnectionClosed as exc:
            self._closed = f"endpoint disconnected: {exc}"
        except json.JSONDecodeError as exc:
            self._closed = f"endpoint sent malformed JSON: {exc}"
        finally:
            for fut in self._pending.values():
                if not fut.done():
                    fut.set_exception(CdpError(self._closed or "connection lost"))
            self._pending.clear()

    async def send(self, method: str, params: Optional[dict] = None, session_id: Optional[str] = None,
                   timeout: float = COMMAND_TIMEOUT_S) -> dict:
        if self._closed:
            raise CdpError(self._closed)
        msg_id = next(self._ids)
        msg = {"id": msg_id, "method": method, "params": params or {}}
        if session_id:
            msg["sessionId"] = session_id
        fut = asyncio.get_running_loop().create_future()
        self._pending[msg_id] = fut
        await self._ws.send(json.dumps(msg))
        try:
            return await asyncio.wait_for(fut, timeout)
        except asyncio.TimeoutError:
            self._pending.pop(msg_id, None)
            raise CdpError(f"{method}: no reply within {timeout:.0f} s") from None

    @property
    def closed(self) -> Optional[str]:
        return self._closed

    async def close(self) -> None:
        await self._ws.close()
        await asyncio.gather(self._reader, return_exceptions=True)


# ---------------------------------------------------------------- one visit

@dataclass
class _Target:
    label: str
    context: str
    session_id: Optional[str]
    target_id: str = ""


@dataclass
class _ParsedScript:
    target: _Target
    raw_id: str
    url: str
    is_wasm: bool

    @property
    def script_id(self) -> str:
        return f"{self.target.label}:{self.raw_id}"


@dataclass
class _VisitState:
    cfg: CrawlConfig
    t0: float
    main: _Target = field(default_factory=lambda: _Target("main", "main_page", None))
    workers: dict[str, _Target] = field(default_factory=dict)
    attach_tasks: list[asyncio.Task] = field(default_factory=list)
    attach_failures: list[str] = field(default_factory=list)
    detached: set = field(default_factory=set)
    scripts: list[_ParsedScript] = field(default_factory=list)
    pending_requests: set = field(default_factory=set)
    sockets: dict[tuple, str] = field(default_factory=dict)
    frames: list[WsFrame] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)
    load_fired: asyncio.Event = field(default_factory=asyncio.Event)
    network_idle: asyncio.Event = field(default_factory=asyncio.Event)
    trace_done: asyncio.Event = field(default_factory=asyncio.Event)

    def elapsed_ms(self) -> float:
        return (asyncio.get_running_loop().time() - self.t0) * 1000.0 / self.cfg.time_scale

    def target(self, session_id: Optional[str]) -> Optional[_Target]:
        return self.main if session_id is None else self.workers.get(session_id)


def _ws_payload(response: dict) -> Union[str, bytes]:
    data = response.get("payloadData", "")
    if response.get("opcode") == 2:
        try:
            return base64.b64decode(data, validate=True)
        except ValueError:
            return data
    return data


class _Visit:
    def __init__(self, conn: CdpConnection, url: str, cfg: CrawlConfig):
        self.conn, self.url, self.cfg = conn, url, cfg
        self.state = _VisitState(cfg, asyncio.get_running_loop().time())
        self.override = inject_core_override(cfg.reported_cores)
        conn.on_event(self._event)

    def _event(self, method: str, params: dict, session_id: Optional[str]) -> None:
        st = self.state
        target = st.target(session_id)
        if method == "Target.attachedToTarget":
            info = params.get("targetInfo") or {}
            if info.get("type") in WORKER_TYPES:
                worker = _Target(f"worker{len(st.workers) + 1}", "worker", params["sessionId"], info.get("targetId", ""))
                st.workers[worker.session_id] = worker
                st.attach_tasks.append(asyncio.create_task(self._attach_worker(worker)))
            elif params.get("waitingForDebugger"):
                # unrelated target (iframe, etc.): let it run unobserved
                st.attach_tasks.append(asyncio.create_task(
                    self._release(params["sessionId"])))
            return
        if target is None:
            return
        if method == "Page.loadEventFired" and target is st.main:
            st.load_fired.set()
        elif method == "Debugger.scriptParsed":
            st.scripts.append(_ParsedScript(target, str(params["scriptId"]), params.get("url") or "inline",
                                            params.get("scriptLanguage") == "WebAssembly"))
        elif method == "Network.requestWillBeSent":
            st.pending_requests.add((target.label, params.get("requestId")))
            st.network_idle.clear()
        elif method in ("Network.loadingFinished", "Network.loadingFailed"):
            st.pending_requests.discard((target.label, params.get("requestId")))
            if not st.pending_requests:
                st.network_idle.set()
        elif method == "Network.webSocketCreated":
            st.sockets[(target.label, params.get("requestId"))] = params.get("url", "")
        elif method in ("Network.webSocketFrameSent", "Network.webSocketFrameReceived"):
            endpoint = st.sockets.get((target.label, params.get("requestId")), "")
            direction = "sent" if method.endswith("Sent") else "received"
            st.frames.append(WsFrame(endpoint, direction, _ws_payload(params.get("response") or {}),
                                     max(0.0, st.elapsed_ms())))
        elif method == "Tracing.dataCollected" and target is st.main:
            st.trace.extend(params.get("value") or ())
        elif method == "Tracing.tracingComplete" and target is st.main:
            st.trace_done.set()

    async def _release(self, session_id: str) -> None:
        try:
            await self.conn.send("Runtime.runIfWaitingForDebugger", session_id=session_id)
        except CdpError as exc:
            log.debug("could not resume non-worker target: %s", exc)

    async def _attach_worker(self, worker: _Target) -> None:
        sid = worker.session_id
        try:
            await self.conn.send("Debugger.enable", session_id=sid)
            await self.conn.send("Network.enable", session_id=sid)
            await self.conn.send("Runtime.evaluate", {"expression": self.override}, session_id=sid)
            await self.conn.send("Runtime.runIfWaitingForDebugger", session_id=sid)
        except CdpError as exc:
            self.state.attach_failures.append(f"{worker.target_id or worker.label}: {exc}")
            self.state.detached.add(worker.label)

    async def _wait(self, event: asyncio.Event, ms: float) -> bool:
        try:
            await asyncio.wait_for(event.wait(), self.cfg.seconds(ms))
            return True
        except asyncio.TimeoutError:
            return False

    async def run(self) -> VisitRecord:
        conn, cfg, st = self.conn, self.cfg, self.state
        visited_at = datetime.now(timezone.utc)
        await conn.send("Page.enable")
        await conn.send("Network.enable")
        await conn.send("Debugger.enable")
        await conn.send("Page.addScriptToEvaluateOnNewDocument", {"source": self.override})
        await conn.send("Target.setAutoAttach", {"autoAttach": True, "waitForDebuggerOnStart": True, "flatten": True})

        st.t0 = asyncio.get_running_loop().time()
        partial = False
        nav = await conn.send("Page.navigate", {"url": self.url})
        if nav.get("errorText"):
            log.warning("%s: navigation failed: %s", self.url, nav["errorText"])
            partial = True
        elif not await self._wait(st.load_fired, cfg.load_timeout_ms):
            log.warning("%s: no load event within %.0f ms", self.url, cfg.load_timeout_ms)
            partial = True
        if st.pending_requests:
            await self._wait(st.network_idle, cfg.settle_extra_ms)
        load_ms = min(st.elapsed_ms(), CRAWL_TIMEOUT_MS + LOAD_GRACE_MS)

        await asyncio.gather(*st.attach_tasks)
        await conn.send("Tracing.start", {
            "traceConfig": {"includedCategories": TRACE_CATEGORIES, "excludedCategories": ["*"]},
            "transferMode": "ReportEvents",
        })
        await asyncio.sleep(cfg.seconds(cfg.profile_ms))
        await conn.send("Tracing.end")
        if not await self._wait(st.trace_done, COMMAND_TIMEOUT_S * 1000 / cfg.time_scale):
            raise CdpError("tracing did not complete")
        # workers that appeared while profiling
        await asyncio.gather(*st.attach_tasks)

        scripts, wasm_modules, by_raw = await self._collect_sources()

        def resolve(raw_id: str, url: str) -> str:
            candidates = by_raw.get(raw_id, ())
            for script_id, script_url in candidates:
                if script_url == url or not url:
                    return script_id
            return ""

        profile = ProfileTrace(cfg.profile_ms, stacks_from_trace(st.trace, resolve, cfg.time_scale))
        return VisitRecord(
            site=urlsplit(self.url).hostname or self.url,
            visited_at=visited_at,
            load_ms=load_ms,
            scripts=tuple(scripts),
            wasm_modules=tuple(wasm_modules),
            profile=profile,
            ws_frames=tuple(st.frames),
            worker_count=len(st.workers),
            reported_cores=cfg.reported_cores,
            partial=partial,
            attach_failures=tuple(st.attach_failures),
        )

    async def _collect_sources(self):
        scripts: list[ScriptArtifact] = []
        wasm_modules: list[WasmArtifact] = []
        by_raw: dict[str, list[tuple[str, str]]] = defaultdict(list)
        for parsed in self.state.scripts:
            if parsed.target.label in self.state.detached:
                continue
            try:
                reply = await self.conn.send("Debugger.getScriptSource", {"scriptId": parsed.raw_id},
                                             session_id=parsed.target.session_id)
            except CdpError as exc:
                if self.conn.closed:
                    raise
                log.warning("%s: no source for script %s: %s", self.url, parsed.script_id, exc)
                continue
            if parsed.is_wasm or "bytecode" in reply:
                try:
                    module = parse_module(base64.b64decode(reply.get("bytecode", "")))
                except (WasmError, ValueError) as exc:
                    log.warning("%s: unparsable Wasm module %s: %s", self.url, parsed.script_id, exc)
                    continue
                if module.function_bodies:
                    wasm_modules.append(WasmArtifact(parsed.script_id, module.function_bodies))
                continue
            scripts.append(ScriptArtifact.from_source(parsed.script_id, parsed.url, reply.get("scriptSource", ""),
                                                      parsed.target.context, self.cfg.keep_sources))
            by_raw[parsed.raw_id].append((parsed.script_id, parsed.url))
        return scripts, wasm_modules, by_raw


async def visit_async(url: str, cfg: CrawlConfig, endpoint: str) -> VisitRecord:
    """Visit ``url`` in the page behind the DevTools WebSocket ``endpoint``."""
    if not urlsplit(url).scheme or not urlsplit(url).netloc:
        raise ValueError(f"not an absolute URL: {url!r}")
    conn = await CdpConnection.open(endpoint)
    try:
        return await _Visit(conn, url, cfg).run()
    finally:
        await conn.close()


def visit(url: str, cfg: CrawlConfig, endpoint: str) -> VisitRecord:
    return asyncio.run(visit_async(url, cfg, endpoint))


@dataclass
class CrawlResult:
    records: list[VisitRecord]
    failures: dict[str, str]


async def crawl_async(urls: Sequence[str], cfg: CrawlConfig, endpoints: Sequence[str],
                      ranks: Optional[dict[str, int]] = None) -> CrawlResult:
    """Visit every URL, at most ``parallel_sessions`` at a time, one page endpoint per session.

    Records come back in input order; a failed visit is reported, not retried.
    """
    if not endpoints:
        raise ValueError("at least one endpoint is required")
    free: asyncio.Queue[str] = asyncio.Queue()
    for ep in list(endpoints)[:cfg.parallel_sessions]:
        free.put_nowait(ep)
    results: list[Optional[VisitRecord]] = [None] * len(urls)
    failures: dict[str, str] = {}

    async def one(i: int, url: str) -> None:
        ep = await free.get()
        try:
            record = await visit_async(url, cfg, ep)
            rank = (ranks or {}).get(url)
            results[i] = replace(record, rank=rank) if rank else record
        except (CdpError, ValueError) as exc:
            log.error("%s: %s", url, exc)
            failures[url] = str(exc)
        finally:
            free.put_nowait(ep)

    await asyncio.gather(*(one(i, u) for i, u in enumerate(urls)))
    return CrawlResult([r for r in results if r is not None], failures)


def crawl(urls: Sequence[str], cfg: CrawlConfig, endpoints: Sequence[str],
          ranks: Optional[dict[str, int]] = None) -> CrawlResult:
    return asyncio.run(crawl_async(urls, cfg, endpoints, ranks))
