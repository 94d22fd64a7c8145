"""Stock microservice behaviors shared by tests, the daemon and orchestration.

Behaviors are async callables (ctx, envelope) -> optional reply payload; the
runtime sends the return value back as the reply to a synchronous call.
"""

from __future__ import annotations

import numpy as np

from . import atoms
from .actors import Address, Node, ServiceDescriptor
from .daq import DaqStore, RunHandle
from .pipeline import NoData, Pipeline


class UnknownService(Exception):
    pass


def resolve_kind(node: Node, kind: str) -> Address:
    """Address of the first local service of the given class."""
    for name, runtime in node.services.items():
        if runtime.desc.kind == kind:
            return Address(node.name, name)
    raise UnknownService(kind)


async def echo_behavior(ctx, env):
    return env.payload


def make_daq_behavior(store: DaqStore):
    """'DAQ Manager' service: run lifecycle plus atom ingestion over the bus."""
    runs: dict[str, RunHandle] = {}

    async def behavior(ctx, env):
        data = env.payload
        if env.kind == "daq/run_start":
            run_id = data.data.get("run_id").value or None
            handle = store.run_start(run_id)
            runs[handle.run_id] = handle
            return atoms.atom("daq/ack", atoms.cluster(run_id=atoms.text(handle.run_id)))
        if env.kind == "daq/run_stop":
            run_id = data.data.get("run_id").value
            summary = store.run_stop(runs.pop(run_id))
            return atoms.atom("daq/summary", atoms.cluster(
                run_id=atoms.text(run_id),
                atom_count=atoms.i32(summary.atom_count),
            ))
        if env.kind == "daq/write":
            run_id = data.name.split("/", 1)[0]
            # convention: ingest envelopes name atoms "<run_id>/<atom name>"
            run = runs.get(run_id)
            if run is None:
                ctx.report_error("warning", "daq_unknown_run", f"run {run_id!r} not open")
                return atoms.atom("daq/nack", atoms.text("unknown run"))
            inner = atoms.DataAtom(data.name.split("/", 1)[1], data.timestamp, data.data)
            store.write_atom(run, inner)
            return atoms.atom("daq/ack", atoms.boolean(True))
        ctx.report_error("warning", "daq_bad_kind", f"unhandled kind {env.kind!r}")
        return None

    return behavior


def make_beam_monitor(outages=None, seed: int | None = None, failure_rate: float = 0.0):
    """'Beam Monitor' stub: availability driven by a scripted outage set and
    an optional seeded per-query failure rate."""
    outages = set(outages or ())
    rng = np.random.default_rng(seed if seed is not None else 0)
    queries = {"count": 0}

    async def behavior(ctx, env):
        if env.kind != "beam/available":
            return None
        queries["count"] += 1
        n = queries["count"]
        available = n not in outages
        if available and failure_rate > 0:
            available = bool(rng.random() >= failure_rate)
        return atoms.atom("beam/status", atoms.boolean(available))

    behavior.queries = queries
    return behavior


def make_analysis_behavior(pipeline: Pipeline):
    """'Analysis' service: the two-call feedback interface over the bus."""

    async def behavior(ctx, env):
        if env.kind == "ana/last_observable":
            name = env.payload.data.value
            try:
                return pipeline.last_observable(name)
            except NoData:
                return atoms.atom("ana/no_data", atoms.text(name))
        if env.kind == "ana/promote":
            run_id = env.payload.data.value
            pipeline.gold(run_id)
            return atoms.atom("ana/ack", atoms.boolean(True))
        return None

    return behavior


async def spawn_standard(node: Node, store: DaqStore | None = None,
                         pipeline: Pipeline | None = None,
                         heartbeat_interval: float = 1.0) -> None:
    """The built-in service set every deployment carries."""
    await node.spawn(ServiceDescriptor(
        "echo", node.name, "Echo", heartbeat_interval=heartbeat_interval),
        echo_behavior)
    if store is not None:
        await node.spawn(ServiceDescriptor(
            "daq_manager", node.name, "DAQ Manager",
            heartbeat_interval=heartbeat_interval, inbox_limit=10_000),
            make_daq_behavior(store))
    if pipeline is not None:
        await node.spawn(ServiceDescriptor(
            "analysis", node.name, "Analysis", heartbeat_interval=heartbeat_interval),
            make_analysis_behavior(pipeline))
