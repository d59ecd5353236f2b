import asyncio
import json

import pytest

from minerscope.profiler import function_loads, phase1_flags, phase2_verdict
from minerscope.telemetry import validate
from minerscope.testbed import (
    BENIGN_KINDS,
    TESTBED_THROTTLES,
    CreditLedger,
    PoolJob,
    PoolProtocol,
    ThrottleSpec,
    credited_hashes,
    serve_pool,
    synth_benign,
    synth_visit,
)
from minerscope.testbed import testbed_corpus as corpus_grid
from minerscope.testbed import testbed_specs as grid
from minerscope.wallet import scan_frames


@pytest.mark.parametrize("target, expected", [
    ("ffffff00", 256), (bytes.fromhex("ffffff00"), 256), ("ffffffff", 1), ("ffff0000", 65536),
    ("00000000", 2**32), ("ff000000", 2**24),
])
def test_credited_hashes(target, expected):
    assert credited_hashes(target) == expected


def test_credit_is_non_increasing_in_target():
    values = [credited_hashes(int.to_bytes(t, 4, "little")) for t in range(0, 2**32, 2**32 // 997)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert min(values) >= 1


@pytest.mark.parametrize("target", ["ffffff", "zzzzzzzz", "ffffff000"])
def test_pool_job_target_validation(target):
    with pytest.raises(ValueError):
        PoolJob("j", "00", target)


@pytest.mark.parametrize("throttle, duty", [(0.0, 1.0), (0.3, 0.7), (0.5, 0.5), (0.99, 100 / 2100)])
def test_duty_cycle(throttle, duty):
    assert ThrottleSpec(throttle).duty_cycle == pytest.approx(duty, rel=1e-9)


@pytest.mark.parametrize("bad", [dict(throttle=1.0), dict(throttle=-0.1), dict(throttle=0.5, sleep_cap_ms=0),
                                 dict(throttle=0.5, hash_ms=0)])
def test_throttle_spec_validation(bad):
    with pytest.raises(ValueError):
        ThrottleSpec(**bad)


def test_testbed_has_24_specs():
    specs = grid()
    assert len(specs) == 24
    assert sorted({s.throttle for _, s in specs}) == list(TESTBED_THROTTLES)


def test_full_miner_is_400_percent():
    rec = synth_visit(ThrottleSpec(0.0), cores=4, profile_ms=30_000)
    assert function_loads(rec)[0].load_pct == pytest.approx(400.0, rel=1e-3)
    assert rec.worker_count == 4
    assert rec.label == "miner"


def test_throttle_floor_on_four_cores():
    for _, spec in grid():
        total = 4 * spec.duty_cycle * 100
        assert total >= 19.0


def test_synthetic_records_satisfy_invariants():
    for rec in corpus_grid(5000) + corpus_grid(30_000):
        validate(rec)


def test_miner_carries_pool_handshake():
    rec = synth_visit(ThrottleSpec(0.5))
    found = scan_frames(rec.ws_frames)
    assert found.sitekeys == ("TESTBEDSITEKEY0000000000000001",)
    assert found.pools == ("testbed.local",)


def test_benign_kinds():
    idle = synth_benign("idle")
    assert function_loads(idle)[0].load_pct < 1
    burst5, burst30 = synth_benign("burst", 5000), synth_benign("burst", 30_000)
    assert phase1_flags(burst5).high_load and not phase2_verdict(burst30).active
    flags = phase1_flags(synth_benign("many_workers", 5000))
    assert (flags.high_load, flags.uses_wasm, flags.many_workers) == (False, False, True)
    codec = phase1_flags(synth_benign("wasm_codec", 5000))
    assert codec.uses_wasm and not codec.many_workers
    with pytest.raises(ValueError):
        synth_benign("crypto")
    assert set(BENIGN_KINDS) == {"idle", "burst", "many_workers", "wasm_codec"}


# ---------------------------------------------------------------- protocol state machine

def test_protocol_site_key_flow():
    ledger = CreditLedger()
    proto = PoolProtocol(ledger)
    [job] = proto.handle(json.dumps({"type": "auth", "params": {"site_key": "TESTKEY"}}))
    assert job["type"] == "job"
    assert set(job["params"]) == {"job_id", "blob", "target"}
    assert job["params"]["target"] == "ffffff00"
    share = {"job_id": job["params"]["job_id"], "nonce": "0badf00d", "result": "ab" * 32}
    [ack] = proto.handle(json.dumps({"type": "submit", "params": share}))
    assert ack == {"type": "hash_accepted", "params": {"hashes": 256, "credited": 256}}
    [ack] = proto.handle(json.dumps({"type": "submit", "params": share}))
    assert ack["params"]["hashes"] == 512
    assert ledger.credits == {"TESTKEY": 512}


def test_protocol_proxy_handshake_records_wallet():
    proto = PoolProtocol(CreditLedger())
    hello = {"identifier": "handshake", "pool": "supportxmr.com", "login": "4676xXzU5tXfx4tDdDS", "password": "",
             "userid": "", "version": 4}
    [job] = proto.handle(json.dumps(hello))
    assert job["type"] == "job"
    assert (proto.identity, proto.identity_kind) == ("4676xXzU5tXfx4tDdDS", "wallet")


@pytest.mark.parametrize("message, error", [
    ("not json", "not JSON"),
    ("[1]", "expected an object"),
    (json.dumps({"type": "auth", "params": {}}), "without site_key"),
    (json.dumps({"type": "submit", "params": {"job_id": "x"}}), "before auth"),
    (json.dumps({"type": "dance"}), "unsupported"),
    (json.dumps({"identifier": "handshake"}), "without login"),
])
def test_protocol_errors(message, error):
    [reply] = PoolProtocol(CreditLedger()).handle(message)
    assert reply["type"] == "error" and error in reply["params"]["error"]


def test_protocol_share_format_and_unknown_job():
    proto = PoolProtocol(CreditLedger())
    [job] = proto.handle(json.dumps({"type": "auth", "params": {"site_key": "K"}}))
    [err] = proto.handle(json.dumps({"type": "submit", "params": {"job_id": "nope", "nonce": "00000000",
                                                                  "result": "00" * 32}}))
    assert "unknown job_id" in err["params"]["error"]
    [err] = proto.handle(json.dumps({"type": "submit", "params": {"job_id": job["params"]["job_id"],
                                                                  "nonce": "xyz", "result": "00" * 32}}))
    assert "malformed share" in err["params"]["error"]


# ---------------------------------------------------------------- live server

def _submit(job_id: str, i: int = 0) -> str:
    return json.dumps({"type": "submit", "params": {"job_id": job_id, "nonce": f"{i:08x}", "result": "22" * 32}})


async def _mine(url: str, hello: dict, shares: int) -> list[dict]:
    from websockets.asyncio.client import connect

    async with connect(url) as ws:
        await ws.send("garbage")
        out = [json.loads(await ws.recv())]
        await ws.send(json.dumps(hello))
        job = json.loads(await ws.recv())
        out.append(job)
        for i in range(shares):
            await ws.send(_submit(job["params"]["job_id"], i))
            out.append(json.loads(await ws.recv()))
        await ws.send(b"\x00")
        out.append(json.loads(await ws.recv()))
        return out


def test_server_credits_each_identity():
    with serve_pool(target="ffff0000") as pool:
        async def run():
            return await asyncio.gather(
                _mine(pool.url, {"type": "auth", "params": {"site_key": "TESTKEY"}}, 3),
                _mine(pool.url, {"identifier": "handshake", "pool": "p", "login": "WALLET", "password": "",
                                 "userid": "", "version": 4}, 2),
            )
        site, wallet = asyncio.run(run())
    for out in (site, wallet):
        assert out[0]["type"] == "error"  # malformed message, connection kept
        assert out[1]["type"] == "job" and out[1]["params"]["target"] == "ffff0000"
        assert out[-1]["type"] == "error"  # binary frame
    assert [o["params"]["credited"] for o in site[2:-1]] == [65536] * 3
    assert site[-2]["params"]["hashes"] == 3 * 65536
    assert pool.ledger.credits == {"TESTKEY": 3 * 65536, "WALLET": 2 * 65536}
    assert pool.ledger.shares == {"TESTKEY": 3, "WALLET": 2}


def test_jobs_belong_to_their_connection():
    from websockets.asyncio.client import connect

    async def run(url):
        async with connect(url) as a, connect(url) as b:
            await a.send(json.dumps({"type": "auth", "params": {"site_key": "KEY-A"}}))
            job = json.loads(await a.recv())["params"]["job_id"]
            await b.send(json.dumps({"type": "auth", "params": {"site_key": "KEY-B"}}))
            await b.recv()
            await b.send(_submit(job))
            return json.loads(await b.recv())

    with serve_pool() as pool:
        reply = asyncio.run(run(pool.url))
    assert reply["type"] == "error" and "unknown job_id" in reply["params"]["error"]
