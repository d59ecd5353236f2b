"""Scripted stand-in for a browser page's DevTools endpoint.

It answers the subset of the protocol the collector uses, replays a
:class:`Scenario`, and logs every command it receives so tests can check
ordering.
"""
from __future__ import annotations

import asyncio
import base64
import json
import time
from dataclasses import dataclass, field
from typing import Optional

from ._server import ThreadedWsServer
from .wasm import build_module

SESSION_GONE = {"code": -32001, "message": "Session with given id not found."}


@dataclass(frozen=True)
class MockScript:
    raw_id: str
    url: str
    source: str = ""
    wasm_bodies: tuple[bytes, ...] = ()


@dataclass(frozen=True)
class MockThread:
    """A thread that spends ``busy`` of its time in ``stack`` (root-first (function, raw script id, url))."""

    stack: tuple[tuple[str, str, str], ...]
    busy: float


@dataclass(frozen=True)
class MockWorker:
    target_id: str
    scripts: tuple[MockScript, ...] = ()
    threads: tuple[MockThread, ...] = ()
    fail_attach: bool = False
    target_type: str = "worker"


@dataclass(frozen=True)
class MockSocketFrame:
    direction: str
    payload: str


@dataclass(frozen=True)
class Scenario:
    scripts: tuple[MockScript, ...] = ()
    threads: tuple[MockThread, ...] = ()
    workers: tuple[MockWorker, ...] = ()
    fire_load: bool = True
    load_delay_s: float = 0.0
    pending_requests: int = 0
    requests_hang: bool = False
    socket_url: str = ""
    socket_frames: tuple[MockSocketFrame, ...] = ()
    samples_per_thread: int = 1000


@dataclass
class LoggedCommand:
    at: float
    method: str
    session_id: Optional[str]
    params: dict = field(default_factory=dict)


def _profile_events(pid: int, tid: int, thread: MockThread, elapsed_us: float, n_samples: int) -> list[dict]:
    nodes = [{"id": 1, "callFrame": {"functionName": "(root)", "scriptId": "0", "url": ""}},
             {"id": 2, "parent": 1, "callFrame": {"functionName": "(idle)", "scriptId": "0", "url": ""}}]
    parent = 1
    for i, (name, script_id, url) in enumerate(thread.stack, start=3):
        frame = {"functionName": name, "scriptId": script_id, "url": url}
        if url.startswith("wasm://"):
            frame["codeType"] = "wasm"
        nodes.append({"id": i, "parent": parent, "callFrame": frame})
        parent = i
    busy_leaf = parent if thread.stack else 2
    interval = elapsed_us / n_samples
    samples = [busy_leaf if int((i + 1) * thread.busy) > int(i * thread.busy) else 2 for i in range(n_samples + 1)]
    # first delta positions the first sample; n_samples intervals follow
    deltas = [0.0] + [interval] * n_samples
    return [
        {"name": "Profile", "ph": "P", "pid": pid, "tid": tid, "id": f"0x{tid}", "args": {"data": {"startTime": 0}}},
        {"name": "ProfileChunk", "ph": "P", "pid": pid, "tid": tid, "id": f"0x{tid}",
         "args": {"data": {"cpuProfile": {"nodes": nodes, "samples": samples}, "timeDeltas": deltas}}},
    ]


class MockBrowser(ThreadedWsServer):
    name = "mock-devtools"

    def __init__(self, scenario: Scenario, host: str = "127.0.0.1", port: int = 0):
        super().__init__(host, port)
        self.scenario = scenario
        self.commands: list[LoggedCommand] = []
        self.new_document_scripts: list[str] = []
        self.worker_evaluations: dict[str, list[str]] = {}
        self.trace_window: Optional[tuple[float, float]] = None
        self._sessions: dict[str, MockWorker] = {}

    def methods(self, session_id: Optional[str] = None, any_session: bool = False) -> list[str]:
        return [c.method for c in self.commands if any_session or c.session_id == session_id]

    def index_of(self, method: str, session_id: Optional[str] = None) -> int:
        return self.methods(session_id).index(method)

    def attached_sessions(self) -> dict[str, str]:
        """target id → session id for every announced worker."""
        return {w.target_id: sid for sid, w in self._sessions.items()}

    async def handler(self, ws) -> None:
        send_lock = asyncio.Lock()

        async def emit(method: str, params: dict, session_id: Optional[str] = None) -> None:
            msg = {"method": method, "params": params}
            if session_id:
                msg["sessionId"] = session_id
            async with send_lock:
                await ws.send(json.dumps(msg))

        async def reply(msg_id: int, result: Optional[dict] = None, error: Optional[dict] = None,
                        session_id: Optional[str] = None) -> None:
            msg = {"id": msg_id}
            msg.update({"error": error} if error else {"result": result or {}})
            if session_id:
                msg["sessionId"] = session_id
            async with send_lock:
                await ws.send(json.dumps(msg))

        background: set[asyncio.Task] = set()

        def spawn(coro) -> None:
            task = asyncio.create_task(coro)
            background.add(task)
            task.add_done_callback(background.discard)

        async for raw in ws:
            msg = json.loads(raw)
            method, params, sid = msg["method"], msg.get("params") or {}, msg.get("sessionId")
            self.commands.append(LoggedCommand(time.monotonic(), method, sid, params))
            if sid is not None:
                worker = self._sessions.get(sid)
                if worker is None or worker.fail_attach:
                    await reply(msg["id"], error=SESSION_GONE, session_id=sid)
                    continue
                result = await self._worker_command(worker, sid, method, params, emit)
                await reply(msg["id"], result, session_id=sid)
                continue
            handled = await self._page_command(method, params, emit, spawn)
            if handled is None:
                await reply(msg["id"], error={"code": -32601, "message": f"'{method}' wasn't found"})
            else:
                await reply(msg["id"], handled)

    async def _worker_command(self, worker: MockWorker, sid: str, method: str, params: dict, emit) -> dict:
        if method == "Debugger.enable":
            for s in worker.scripts:
                await emit("Debugger.scriptParsed", self._parsed(s), sid)
        elif method == "Runtime.evaluate":
            self.worker_evaluations.setdefault(sid, []).append(params.get("expression", ""))
        elif method == "Debugger.getScriptSource":
            return self._source(worker.scripts, params.get("scriptId"))
        return {}

    @staticmethod
    def _parsed(script: MockScript) -> dict:
        params = {"scriptId": script.raw_id, "url": script.url}
        if script.wasm_bodies:
            params["scriptLanguage"] = "WebAssembly"
        return params

    @staticmethod
    def _source(scripts, raw_id) -> dict:
        for s in scripts:
            if s.raw_id == raw_id:
                if s.wasm_bodies:
                    return {"scriptSource": "", "bytecode": base64.b64encode(build_module(s.wasm_bodies)).decode()}
                return {"scriptSource": s.source}
        return {"scriptSource": ""}

    async def _page_command(self, method: str, params: dict, emit, spawn) -> Optional[dict]:
        sc = self.scenario
        if method in ("Page.enable", "Network.enable", "Debugger.enable", "Target.setAutoAttach",
                      "Runtime.runIfWaitingForDebugger"):
            return {}
        if method == "Page.addScriptToEvaluateOnNewDocument":
            self.new_document_scripts.append(params.get("source", ""))
            return {"identifier": str(len(self.new_document_scripts))}
        if method == "Page.navigate":
            spawn(self._load_page(emit))
            return {"frameId": "F1", "loaderId": "L1"}
        if method == "Debugger.getScriptSource":
            return self._source(sc.scripts, params.get("scriptId"))
        if method == "Tracing.start":
            self.trace_window = (time.monotonic(), 0.0)
            return {}
        if method == "Tracing.end":
            start = self.trace_window[0] if self.trace_window else time.monotonic()
            end = time.monotonic()
            self.trace_window = (start, end)
            spawn(self._send_trace(emit, (end - start) * 1e6))
            return {}
        return None

    async def _load_page(self, emit) -> None:
        sc = self.scenario
        for s in sc.scripts:
            await emit("Debugger.scriptParsed", self._parsed(s))
        for n in range(sc.pending_requests):
            await emit("Network.requestWillBeSent", {"requestId": f"R{n}"})
        for i, worker in enumerate(sc.workers, start=1):
            sid = f"SESSION-{i}"
            self._sessions[sid] = worker
            await emit("Target.attachedToTarget", {
                "sessionId": sid,
                "targetInfo": {"targetId": worker.target_id, "type": worker.target_type, "url": ""},
                "waitingForDebugger": True,
            })
        if sc.socket_url:
            await emit("Network.webSocketCreated", {"requestId": "WS1", "url": sc.socket_url})
            for f in sc.socket_frames:
                kind = "Sent" if f.direction == "sent" else "Received"
                await emit(f"Network.webSocketFrame{kind}",
                           {"requestId": "WS1", "timestamp": time.monotonic(),
                            "response": {"opcode": 1, "mask": kind == "Sent", "payloadData": f.payload}})
        if sc.load_delay_s:
            await asyncio.sleep(sc.load_delay_s)
        if sc.fire_load:
            await emit("Page.loadEventFired", {"timestamp": time.monotonic()})
        if not sc.requests_hang:
            for n in range(sc.pending_requests):
                await emit("Network.loadingFinished", {"requestId": f"R{n}"})

    async def _send_trace(self, emit, elapsed_us: float) -> None:
        sc = self.scenario
        threads = list(sc.threads)
        for w in sc.workers:
            if not w.fail_attach:
                threads.extend(w.threads)
        events: list[dict] = []
        for tid, thread in enumerate(threads, start=1):
            events.extend(_profile_events(1, tid, thread, elapsed_us, sc.samples_per_thread))
        for i in range(0, len(events), 4):
            await emit("Tracing.dataCollected", {"value": events[i:i + 4]})
        await emit("Tracing.tracingComplete", {"dataLossOccurred": False})


def miner_scenario(workers: int = 2, busy: float = 0.9, *, failing: int = 0,
                   wasm_bodies: tuple[bytes, ...] = (b"\x00\x41\x01\x1a\x0b",)) -> Scenario:
    """A page loading a miner script that starts ``workers`` Wasm-hashing workers."""
    miner_src = "var m = new Miner('KEY'); m.start();"
    worker_src = "self.onmessage = function (e) { hash(e.data); };"
    main_scripts = (
        MockScript("10", "https://example.org/app.js", "console.log('hi');"),
        MockScript("11", "https://miner.example/lib/miner.min.js", miner_src),
    )
    ws = []
    for i in range(workers):
        ws.append(MockWorker(
            target_id=f"T{i + 1}",
            scripts=(MockScript("5", "blob:https://example.org/worker", worker_src),
                     MockScript("6", "wasm://wasm/0001", wasm_bodies=wasm_bodies)),
            threads=(MockThread((("onmessage", "5", "blob:https://example.org/worker"),
                                 ("hash", "5", "blob:https://example.org/worker"),
                                 ("$cryptonight", "6", "wasm://wasm/0001")), busy),),
            fail_attach=i < failing,
        ))
    return Scenario(
        scripts=main_scripts,
        threads=(MockThread((("start", "11", "https://miner.example/lib/miner.min.js"),), 0.01),),
        workers=tuple(ws),
        pending_requests=2,
        socket_url="wss://pool.miner.example/proxy",
        socket_frames=(MockSocketFrame("sent", json.dumps({"type": "auth", "params": {"site_key": "KEY0123456789"}})),
                       MockSocketFrame("received", json.dumps({"type": "authed", "params": {"hashes": 0}}))),
    )
