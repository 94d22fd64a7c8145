import asyncio
import time

import pytest

from circus import atoms
from circus.actors import (
    Address,
    DuplicateName,
    Envelope,
    Node,
    ResourceExhausted,
    RestartPolicy,
    ServiceDescriptor,
    Timeout,
    UnknownDestination,
    UnknownId,
)
from circus.services import UnknownService, echo_behavior, resolve_kind

FAST = dict(guardian_tick_interval=0.02, peer_interval=0.08, restart_backoff_base=0.1)
BEAT = 0.05


def desc(name, node="alpha", kind=None, **kw):
    return ServiceDescriptor(name, node, kind or name.title(),
                             heartbeat_interval=BEAT, **kw)


def run(coro):
    return asyncio.run(coro)


async def start_node(name="alpha", port=None, **kw):
    settings = dict(FAST)
    settings.update(kw)
    return await Node(name, port=port, **settings).start()


def ping_atom(i=0):
    return atoms.atom("ping", atoms.i32(i))


# -- spawn -----------------------------------------------------------------------

def test_spawn_registers_and_beats_within_one_interval():
    async def main():
        node = await start_node()
        await node.spawn(desc("daq_manager", kind="DAQ Manager"), echo_behavior)
        await asyncio.sleep(BEAT)
        row, = node.guardian.table()
        assert (row.service, row.status) == ("daq_manager", "alive")
        assert row.beat_age_s <= 2 * BEAT
        await node.stop()
    run(main())


def test_spawn_duplicate_name_rejected():
    async def main():
        node = await start_node()
        await node.spawn(desc("svc"), echo_behavior)
        with pytest.raises(DuplicateName):
            await node.spawn(desc("svc"), echo_behavior)
        await node.stop()
    run(main())


def test_spawn_hundred_services_all_alive():
    async def main():
        node = await start_node()
        for i in range(100):
            await node.spawn(desc(f"svc{i:03d}", kind="Bulk"), echo_behavior)
        await asyncio.sleep(3 * BEAT)
        table = node.guardian.table()
        assert len(table) == 100
        assert {row.status for row in table} == {"alive"}
        await node.stop()
    run(main())


def test_heartbeat_interval_floor():
    with pytest.raises(Exception):
        ServiceDescriptor("x", "alpha", "X", heartbeat_interval=0.001).validate()


# -- send/call ---------------------------------------------------------------------

def test_local_echo_round_trip_under_10ms():
    async def main():
        node = await start_node()
        await node.spawn(desc("echo"), echo_behavior)
        await node.call(Address("alpha", "echo"), "ping", ping_atom())  # warmup
        t0 = time.monotonic()
        await node.call(Address("alpha", "echo"), "ping", ping_atom())
        assert time.monotonic() - t0 < 0.010
        await node.stop()
    run(main())


def test_send_to_unregistered_service_unknown_destination():
    async def main():
        node = await start_node()
        with pytest.raises(UnknownDestination):
            await node.send_kind(Address("alpha", "ghost"), "x", ping_atom())
        await node.stop()
    run(main())


def test_ten_thousand_messages_in_send_order():
    async def main():
        node = await start_node()
        seen = []

        async def sink(ctx, env):
            seen.append(env.payload.data.value)

        await node.spawn(desc("sink"), sink)
        for i in range(10_000):
            await node.send_kind(Address("alpha", "sink"), "n", ping_atom(i))
        for _ in range(200):
            if len(seen) == 10_000:
                break
            await asyncio.sleep(0.02)
        assert seen == list(range(10_000))  # sequence-number oracle
        await node.stop()
    run(main())


def test_call_timeout_on_silent_service():
    async def main():
        node = await start_node()

        async def mute(ctx, env):
            return None

        await node.spawn(desc("mute"), mute)
        with pytest.raises(Timeout):
            await node.call(Address("alpha", "mute"), "ping", ping_atom(), timeout=0.2)
        await node.stop()
    run(main())


def test_envelope_requires_distinct_endpoints():
    env = Envelope(1, Address("a", "s"), Address("a", "s"), "k",
                   ping_atom(), atoms.timestamp_now())
    with pytest.raises(Exception):
        env.validate()


def test_resolve_kind():
    async def main():
        node = await start_node()
        await node.spawn(desc("echo", kind="Echo"), echo_behavior)
        assert resolve_kind(node, "Echo") == Address("alpha", "echo")
        with pytest.raises(UnknownService):
            resolve_kind(node, "Teleport")
        await node.stop()
    run(main())


# -- watchdog -----------------------------------------------------------------------

def test_killed_service_marked_dead_with_error_within_three_beats():
    async def main():
        node = await start_node()
        handle = await node.spawn(
            desc("victim", kind="Victim"),
            echo_behavior)
        await asyncio.sleep(2 * BEAT)
        handle.kill()
        t0 = time.monotonic()
        while node.guardian.services["victim"].status != "dead":
            await asyncio.sleep(0.01)
            assert time.monotonic() - t0 < 10 * BEAT
        elapsed = time.monotonic() - t0
        assert elapsed <= 3 * BEAT + 0.1
        codes = [r.code for r in node.errors.list(severity="error")]
        assert "service_dead" in codes
        await node.stop()
    run(main())


def test_healthy_services_produce_empty_verdicts():
    async def main():
        node = await start_node()
        await node.spawn(desc("echo"), echo_behavior)
        await asyncio.sleep(2 * BEAT)
        assert node.guardian.tick() == []
        await node.stop()
    run(main())


def test_dead_service_restarted_per_policy_with_info_record():
    async def main():
        node = await start_node()
        handle = await node.spawn(
            desc("phoenix", kind="Phoenix",
                 restart_policy=RestartPolicy("on_failure", 3)),
            echo_behavior)
        handle.kill()
        for _ in range(300):
            if handle.alive and node.guardian.services["phoenix"].status == "alive":
                break
            await asyncio.sleep(0.02)
        assert handle.alive
        assert node.guardian.services["phoenix"].restarts == 1
        assert "service_restarted" in [r.code for r in node.errors.list(severity="info")]
        reply = await node.call(Address("alpha", "phoenix"), "ping", ping_atom())
        assert reply.name == "ping"
        await node.stop()
    run(main())


def test_restart_never_policy_stays_dead():
    async def main():
        node = await start_node()
        handle = await node.spawn(
            desc("mortal", kind="Mortal", restart_policy=RestartPolicy("never")),
            echo_behavior)
        handle.kill()
        await asyncio.sleep(10 * BEAT)
        assert node.guardian.services["mortal"].status == "dead"
        assert not handle.alive
        await node.stop()
    run(main())


def test_restarts_exhaust_after_max_attempts():
    async def main():
        node = await start_node()

        async def crasher(ctx, env):
            raise RuntimeError("boom")

        handle = await node.spawn(
            desc("flaky", kind="Flaky", restart_policy=RestartPolicy("on_failure", 2)),
            crasher)
        for _ in range(4):
            try:
                await node.send_kind(Address("alpha", "flaky"), "hit", ping_atom())
            except Exception:
                pass
            await asyncio.sleep(0.3)
        await asyncio.sleep(1.0)
        codes = [r.code for r in node.errors.list()]
        assert "restarts_exhausted" in codes
        await node.stop()
    run(main())


def test_crashing_handler_reports_and_dies():
    async def main():
        node = await start_node()

        async def crasher(ctx, env):
            raise ValueError("bad message")

        handle = await node.spawn(
            desc("fragile", kind="Fragile", restart_policy=RestartPolicy("never")),
            crasher)
        await node.send_kind(Address("alpha", "fragile"), "hit", ping_atom())
        await asyncio.sleep(0.1)
        assert not handle.alive
        assert "service_crash" in [r.code for r in node.errors.list(severity="error")]
        await node.stop()
    run(main())


def test_queue_preserved_across_restart_and_overflow_reports():
    async def main():
        node = await start_node(inbox_limit=50)
        seen = []

        async def sink(ctx, env):
            seen.append(env.payload.data.value)

        handle = await node.spawn(
            desc("sink", kind="Sink", restart_policy=RestartPolicy("on_failure", 3)),
            sink)
        handle.kill()
        for i in range(50 - 1):  # one slot is taken by a queued heartbeat at kill time
            await node.send_kind(Address("alpha", "sink"), "n", ping_atom(i))
        with pytest.raises(ResourceExhausted):
            for i in range(5):
                await node.send_kind(Address("alpha", "sink"), "overflow", ping_atom(i))
        assert "inbox_overflow" in [r.code for r in node.errors.list(severity="error")]
        # wait for the guardian restart; the queued messages must drain
        for _ in range(400):
            if len(seen) >= 49:
                break
            await asyncio.sleep(0.02)
        assert seen[:49] == list(range(49))
        await node.stop()
    run(main())


# -- error manager ----------------------------------------------------------------------

def test_error_lifecycle_and_filters():
    async def main():
        node = await start_node()
        eid = node.errors.report(Address("alpha", "svc"), "error", "c1", "first")
        node.errors.report(Address("alpha", "svc"), "info", "c2", "second")
        assert [r.code for r in node.errors.list(severity="error")] == ["c1"]
        rec = node.errors.acknowledge(eid)
        assert rec.acknowledged
        with pytest.raises(UnknownId):
            node.errors.acknowledge(("alpha", 999))
        await node.stop()
    run(main())


def test_fatal_records_survive_auto_clear():
    async def main():
        node = await start_node()
        fatal_id = node.errors.report(Address("alpha", "svc"), "fatal", "f", "bad")
        info_id = node.errors.report(Address("alpha", "svc"), "info", "i", "ok")
        node.errors.acknowledge(fatal_id)
        node.errors.acknowledge(info_id)
        node.errors.clear_acknowledged()
        codes = [r.code for r in node.errors.list()]
        assert codes == ["f"]
        await node.stop()
    run(main())


def test_error_ids_strictly_increasing_per_source():
    async def main():
        node = await start_node()
        ids = [node.errors.report(Address("alpha", "svc"), "info", f"c{i}", "x")[1]
               for i in range(10)]
        assert ids == sorted(ids)
        assert len(set(ids)) == 10
        await node.stop()
    run(main())


# -- two-node bus ---------------------------------------------------------------------------

async def two_nodes(port_a=15811, port_b=15812):
    a = await start_node("alpha", port=port_a)
    b = await start_node("beta", port=port_b)
    await a.connect("127.0.0.1", port_b)
    for _ in range(100):
        if "alpha" in b.peers:
            break
        await asyncio.sleep(0.01)
    return a, b


def test_cross_node_call_and_order():
    async def main():
        a, b = await two_nodes()
        seen = []

        async def sink(ctx, env):
            seen.append(env.payload.data.value)

        await b.spawn(desc("sink", node="beta"), sink)
        for i in range(200):
            await a.send_kind(Address("beta", "sink"), "n", ping_atom(i))
        for _ in range(100):
            if len(seen) == 200:
                break
            await asyncio.sleep(0.02)
        assert seen == list(range(200))
        await a.stop()
        await b.stop()
    run(main())


def test_cross_node_unknown_service_nack():
    async def main():
        a, b = await two_nodes(15813, 15814)
        with pytest.raises(UnknownDestination):
            await a.send_kind(Address("beta", "ghost"), "x", ping_atom())
        await a.stop()
        await b.stop()
    run(main())


def test_errors_replicate_cluster_wide():
    async def main():
        a, b = await two_nodes(15815, 15816)
        for i in range(10):
            a.errors.report(Address("alpha", "svc"), "error", f"a{i}", "x")
            b.errors.report(Address("beta", "svc"), "error", f"b{i}", "x")
        await asyncio.sleep(0.3)
        merged_a = a.errors.list()
        merged_b = b.errors.list()
        assert len(merged_a) == len(merged_b) == 20
        for origin in ("alpha", "beta"):
            ids = [r.id for r in merged_a if r.origin == origin]
            assert ids == sorted(ids)
        # acknowledge propagates
        target = merged_a[0]
        a.errors.acknowledge(target.error_id)
        await asyncio.sleep(0.2)
        assert any(r.error_id == target.error_id and r.acknowledged
                   for r in b.errors.list())
        await a.stop()
        await b.stop()
    run(main())


def test_partition_marks_peers_dead_and_healing_converges():
    async def main():
        a, b = await two_nodes(15817, 15818)
        await asyncio.sleep(0.2)
        assert a.guardian.peers["beta"].status == "alive"
        assert b.guardian.peers["alpha"].status == "alive"
        a.sever("beta")
        b.sever("alpha")
        deadline = time.monotonic() + 3 * 0.08 + 1.0
        while time.monotonic() < deadline:
            if (a.guardian.peers["beta"].status == "dead"
                    and b.guardian.peers["alpha"].status == "dead"):
                break
            await asyncio.sleep(0.01)
        assert a.guardian.peers["beta"].status == "dead"
        assert b.guardian.peers["alpha"].status == "dead"
        a.heal("beta")
        b.heal("alpha")
        t0 = time.monotonic()
        while time.monotonic() - t0 < 2 * 0.08 + 1.0:
            if (a.guardian.peers["beta"].status == "alive"
                    and b.guardian.peers["alpha"].status == "alive"):
                break
            await asyncio.sleep(0.01)
        healing = time.monotonic() - t0
        assert a.guardian.peers["beta"].status == "alive"
        assert b.guardian.peers["alpha"].status == "alive"
        assert healing <= 2 * 0.08 + 0.5
        await a.stop()
        await b.stop()
    run(main())


def test_duplicate_envelope_ids_deduplicated():
    async def main():
        a, b = await two_nodes(15819, 15820)
        hits = []

        async def sink(ctx, env):
            hits.append(env.id)

        await b.spawn(desc("sink", node="beta"), sink)
        env = Envelope(41, Address("alpha", "tester"), Address("beta", "sink"),
                       "n", ping_atom(), atoms.timestamp_now())
        await a.send(env)
        await a.send(env)  # identical id: at-least-once wire, exactly-once effect
        await asyncio.sleep(0.3)
        assert hits == [41]
        await a.stop()
        await b.stop()
    run(main())
