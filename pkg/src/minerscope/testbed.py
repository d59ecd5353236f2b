"""Ground-truth generator: synthetic miner/benign visits and a mock mining pool.

The synthetic miner does not hash anything. It models per-worker timing of a
throttled miner (compute one hash, then idle) and emits the telemetry such a
page would produce.
"""
from __future__ import annotations

import hashlib
import json
import random
import secrets
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Optional, Union

from ._server import ThreadedWsServer
from .telemetry import (
    WASM_FRAME,
    FrameRef,
    ProfileTrace,
    ScriptArtifact,
    StackAggregate,
    VisitRecord,
    WasmArtifact,
    WsFrame,
)

SAMPLE_INTERVAL_MS = 0.2
DEFAULT_TARGET = "ffffff00"
TESTBED_THROTTLES = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99)
TESTBED_SITEKEY = "TESTBEDSITEKEY0000000000000001"
EPOCH = datetime(2018, 5, 1, tzinfo=timezone.utc)


def credited_hashes(target: Union[bytes, str]) -> int:
    """Hashes credited for one accepted share at ``target``.

    The four target bytes are read as a little-endian uint32 ``t``; a random
    hash qualifies with probability ``(t + 1) / 2**32``.
    """
    raw = bytes.fromhex(target) if isinstance(target, str) else bytes(target)
    if len(raw) != 4:
        raise ValueError("target must be exactly 4 bytes")
    t = int.from_bytes(raw, "little")
    return max(1, round(2**32 / (t + 1)))


@dataclass(frozen=True)
class PoolJob:
    job_id: str
    blob: str
    target: str

    def __post_init__(self):
        if len(self.target) != 8:
            raise ValueError("target must be 8 hex characters")
        bytes.fromhex(self.target)
        bytes.fromhex(self.blob)


@dataclass(frozen=True)
class ThrottleSpec:
    throttle: float
    sleep_cap_ms: float = 2000.0
    hash_ms: float = 100.0

    def __post_init__(self):
        if not 0 <= self.throttle < 1:
            raise ValueError("throttle must be in [0, 1)")
        if self.sleep_cap_ms <= 0 or self.hash_ms <= 0:
            raise ValueError("sleep_cap_ms and hash_ms must be positive")

    @property
    def sleep_ms(self) -> float:
        return min(self.sleep_cap_ms, self.hash_ms * self.throttle / (1 - self.throttle))

    @property
    def duty_cycle(self) -> float:
        """Fraction of wall time one worker spends hashing."""
        return self.hash_ms / (self.hash_ms + self.sleep_ms)


# ---------------------------------------------------------------- miner code variants

@dataclass(frozen=True)
class MinerVariant:
    name: str
    url: str
    wrapper: str
    hash_fn: str
    loop_fn: str
    wasm_seed: bytes


VARIANTS = {
    "coinhive": MinerVariant(
        "coinhive", "https://testbed.local/lib/coinhive.min.js",
        "var CoinHive=CoinHive||{};CoinHive.CONFIG={LIB_URL:'https://testbed.local/lib/'};",
        "CryptonightWASMWrapper.hash", "CryptonightWASMWrapper.workThrottled", b"cn-v7",
    ),
    "cryptoloot": MinerVariant(
        "cryptoloot", "https://testbed.local/lib/crypta.js",
        "var CRLT=CRLT||{};CRLT.CONFIG={WEBSOCKET_SHARDS:[['wss://testbed.local/proxy']]};",
        "CryptonightWASMWrapper.hash", "CryptonightWASMWrapper.workThrottled", b"cl-v1",
    ),
}


def wasm_bodies(seed: bytes, count: int = 3) -> tuple[bytes, ...]:
    """Deterministic stand-in function bodies: no locals, a run of i32.const/drop, end."""
    bodies = []
    for i in range(count):
        tag = hashlib.sha256(seed + bytes([i])).digest()[:8]
        body = b"\x00" + b"".join(b"\x41" + bytes([b & 0x3F]) + b"\x1a" for b in tag) + b"\x0b"
        bodies.append(body)
    return tuple(bodies)


def miner_source(variant: MinerVariant, wrapper: str = "") -> str:
    return (
        f"{variant.wrapper}{wrapper}"
        f"function {variant.loop_fn}(){{var s=Date.now();{variant.hash_fn}();"
        f"var e=Date.now()-s;setTimeout({variant.loop_fn},Math.min(2000,e*t/(1-t)));}}"
    )


def _stack_time(total_ms: float) -> tuple[int, float]:
    if total_ms <= 0:
        return 0, 0.0
    return max(1, round(total_ms / SAMPLE_INTERVAL_MS)), total_ms


def handshake_frames(endpoint: str, identity: str, *, wallet: bool = False, pool: str = "testbed.local",
                     target: str = DEFAULT_TARGET, job_id: str = "job-1") -> tuple[WsFrame, ...]:
    if wallet:
        hello = {"identifier": "handshake", "pool": pool, "login": identity, "password": "",
                 "userid": "", "version": 4}
    else:
        hello = {"type": "auth", "params": {"site_key": identity, "type": "anonymous", "user": None}}
    job = {"type": "job", "params": {"job_id": job_id, "blob": "07" * 76, "target": target}}
    return (
        WsFrame(endpoint, "sent", json.dumps(hello), 120.0),
        WsFrame(endpoint, "received", json.dumps(job), 160.0),
    )


def synth_visit(spec: ThrottleSpec, cores: int = 4, profile_ms: float = 30_000, *,
                variant: str = "coinhive", site: Optional[str] = None, wrapper: str = "",
                identity: str = TESTBED_SITEKEY, wallet: bool = False, rank: Optional[int] = None,
                endpoint: str = "wss://testbed.local/proxy") -> VisitRecord:
    """A labeled miner visit: ``cores`` workers each running the throttled hash loop."""
    if cores < 1:
        raise ValueError("cores must be >= 1")
    v = VARIANTS[variant]
    site = site or f"{v.name}-t{round(spec.throttle * 100):02d}.testbed.local"
    main = ScriptArtifact.from_source("main:1", v.url, miner_source(v, wrapper), "main_page")
    scripts = [main]
    stacks = []
    per_worker = spec.duty_cycle * profile_ms
    for w in range(cores):
        sid = f"worker{w}:1"
        scripts.append(ScriptArtifact.from_source(sid, v.url, miner_source(v, wrapper), "worker"))
        hash_fn, loop_fn = FrameRef(v.hash_fn, sid), FrameRef(v.loop_fn, sid)
        # the bulk of the time is spent in Wasm below the JS wrapper
        wasm_ms = per_worker * 0.999
        stacks.append(StackAggregate((WASM_FRAME, hash_fn, loop_fn), *_stack_time(wasm_ms)))
        stacks.append(StackAggregate((hash_fn, loop_fn), *_stack_time(per_worker - wasm_ms)))
    stacks.append(StackAggregate((FrameRef("(root)", ""),), 0, 0.0))
    bodies = wasm_bodies(v.wasm_seed)
    return VisitRecord(
        site=site,
        rank=rank,
        visited_at=EPOCH,
        load_ms=850.0,
        scripts=tuple(scripts),
        wasm_modules=tuple(WasmArtifact(f"worker{w}:1", bodies) for w in range(cores)),
        profile=ProfileTrace(float(profile_ms), tuple(stacks)),
        ws_frames=handshake_frames(endpoint, identity, wallet=wallet),
        worker_count=cores,
        reported_cores=cores,
        label="miner",
    )


BURST_MS = 2500.0


def synth_benign(kind: str, profile_ms: float = 30_000, *, site: Optional[str] = None,
                 seed: int = 0, cores: int = 4, rank: Optional[int] = None) -> VisitRecord:
    """Negative controls.

    idle
        Only sporadic event handlers.
    burst
        One function computes for 2.5 s of CPU right after load, then stops:
        50% of one core in a 5 s profile, about 8% in a 30 s profile.
    many_workers
        Six workers polling with low load; no Wasm.
    wasm_codec
        A Wasm module running one short decode.
    """
    rng = random.Random(f"{kind}:{seed}")
    site = site or f"{kind.replace('_', '-')}-{seed}.benign.local"
    app = ScriptArtifact.from_source("main:1", f"https://{site}/static/app.js",
                                     f"/* {kind} {seed} */function render(){{}}function onTick(){{}}", "main_page")
    scripts = [app]
    stacks = [StackAggregate((FrameRef("onTick", "main:1"),), *_stack_time(profile_ms * rng.uniform(0.001, 0.004)))]
    wasm: list[WasmArtifact] = []
    workers = 0
    if kind == "idle":
        pass
    elif kind == "burst":
        stacks.append(StackAggregate((FrameRef("render", "main:1"),), *_stack_time(min(BURST_MS, profile_ms))))
    elif kind == "many_workers":
        workers = 6
        for w in range(workers):
            sid = f"worker{w}:1"
            scripts.append(ScriptArtifact.from_source(sid, f"https://{site}/static/poll.js",
                                                      "onmessage=function(e){postMessage(e.data)}", "worker"))
            stacks.append(StackAggregate((FrameRef("onmessage", sid),),
                                         *_stack_time(profile_ms * rng.uniform(0.0005, 0.002))))
    elif kind == "wasm_codec":
        codec = ScriptArtifact.from_source("main:2", f"https://{site}/static/codec.js",
                                           "function decodeFrame(b){return Module._decode(b)}", "main_page")
        scripts.append(codec)
        wasm.append(WasmArtifact("main:2", wasm_bodies(f"codec{seed}".encode(), 2)))
        stacks.append(StackAggregate((WASM_FRAME, FrameRef("decodeFrame", "main:2")), *_stack_time(150.0)))
    else:
        raise ValueError(f"unknown benign kind {kind!r}")
    return VisitRecord(
        site=site,
        rank=rank,
        visited_at=EPOCH,
        load_ms=rng.uniform(300, 4000),
        scripts=tuple(scripts),
        wasm_modules=tuple(wasm),
        profile=ProfileTrace(float(profile_ms), tuple(stacks)),
        worker_count=workers,
        reported_cores=cores,
        label="benign",
    )


BENIGN_KINDS = ("idle", "burst", "many_workers", "wasm_codec")


def testbed_specs(hash_ms: float = 100.0, sleep_cap_ms: float = 2000.0) -> list[tuple[str, ThrottleSpec]]:
    """The 24 testbed pages: 12 throttle levels times two miner implementations."""
    return [(variant, ThrottleSpec(t, sleep_cap_ms, hash_ms)) for variant in VARIANTS for t in TESTBED_THROTTLES]


def testbed_corpus(profile_ms: float, benign_per_kind: int = 5, cores: int = 4) -> list[VisitRecord]:
    records = [synth_visit(spec, cores, profile_ms, variant=variant) for variant, spec in testbed_specs()]
    for kind in BENIGN_KINDS:
        for i in range(benign_per_kind):
            records.append(synth_benign(kind, profile_ms, seed=i, cores=cores))
    return records


# ---------------------------------------------------------------- mock pool server

@dataclass
class CreditLedger:
    """Credited hashes per identity; only the server's event loop writes to it."""
    credits: dict[str, int] = field(default_factory=dict)
    shares: dict[str, int] = field(default_factory=dict)

    def credit(self, identity: str, hashes: int) -> int:
        self.credits[identity] = self.credits.get(identity, 0) + hashes
        self.shares[identity] = self.shares.get(identity, 0) + 1
        return self.credits[identity]


def _is_hex(value, length: Optional[int] = None) -> bool:
    if not isinstance(value, str) or (length is not None and len(value) != length):
        return False
    try:
        bytes.fromhex(value)
    except ValueError:
        return False
    return True


def error_frame(message: str) -> dict:
    return {"type": "error", "params": {"error": message}}


class PoolProtocol:
    """Per-connection state machine for the testbed pool protocol.

    Messages are JSON objects with ``type`` in auth/job/submit/hash_accepted/error.
    The proxy handshake form (``identifier``/``pool``/``login``/...) is accepted
    in place of ``auth``.
    """

    def __init__(self, ledger: CreditLedger, target: str = DEFAULT_TARGET):
        self.ledger = ledger
        self.target = target
        self.identity: Optional[str] = None
        self.identity_kind: Optional[str] = None
        self.jobs: dict[str, PoolJob] = {}

    def _new_job(self) -> dict:
        job = PoolJob(secrets.token_hex(8), secrets.token_hex(76), self.target)
        self.jobs[job.job_id] = job
        return {"type": "job", "params": {"job_id": job.job_id, "blob": job.blob, "target": job.target}}

    def handle(self, text: str) -> list[dict]:
        try:
            msg = json.loads(text)
        except ValueError:
            return [error_frame("malformed message: not JSON")]
        if not isinstance(msg, dict):
            return [error_frame("malformed message: expected an object")]
        params = msg.get("params") if isinstance(msg.get("params"), dict) else {}

        if msg.get("identifier") == "handshake":
            login = msg.get("login")
            if not isinstance(login, str) or not login:
                return [error_frame("handshake without login")]
            self.identity, self.identity_kind = login, "wallet"
            return [self._new_job()]

        kind = msg.get("type")
        if kind == "auth":
            key = params.get("site_key")
            login = params.get("login")
            if isinstance(key, str) and key:
                self.identity, self.identity_kind = key, "site_key"
            elif isinstance(login, str) and login:
                self.identity, self.identity_kind = login, "wallet"
            else:
                return [error_frame("auth without site_key or login")]
            return [self._new_job()]
        if kind == "submit":
            if self.identity is None:
                return [error_frame("submit before auth")]
            job_id = params.get("job_id")
            if job_id not in self.jobs:
                return [error_frame(f"unknown job_id {job_id!r}")]
            if not _is_hex(params.get("nonce"), 8) or not _is_hex(params.get("result"), 64):
                return [error_frame("malformed share: nonce must be 8 and result 64 hex characters")]
            hashes = credited_hashes(self.jobs[job_id].target)
            total = self.ledger.credit(self.identity, hashes)
            return [{"type": "hash_accepted", "params": {"hashes": total, "credited": hashes}}]
        return [error_frame(f"unsupported message type {kind!r}")]


class PoolServer(ThreadedWsServer):
    """Mock pool; each connection gets its own :class:`PoolProtocol`, all sharing one ledger."""

    name = "pool-server"

    def __init__(self, host: str = "127.0.0.1", port: int = 0, target: str = DEFAULT_TARGET):
        super().__init__(host, port)
        self.target = target
        self.ledger = CreditLedger()

    async def handler(self, ws):
        proto = PoolProtocol(self.ledger, self.target)
        async for text in ws:
            if isinstance(text, bytes):
                await ws.send(json.dumps(error_frame("binary frames are not supported")))
                continue
            for reply in proto.handle(text):
                await ws.send(json.dumps(reply))


def serve_pool(host: str = "127.0.0.1", port: int = 0, target: str = DEFAULT_TARGET) -> PoolServer:
    return PoolServer(host, port, target).start()
