"""Actor runtime: one Node per machine hosting supervised microservices.

Each service is an independent actor with a serial inbox and a heartbeat; a
per-node Guardian watches local services and peer Guardians and restarts the
fallen per policy. A built-in error manager collects every error record and
replicates it to connected peers so any node can list the cluster's errors.
"""

from __future__ import annotations

import asyncio
import time
from dataclasses import dataclass, replace

from .. import atoms
from .wire import (
    PROTOCOL_VERSION,
    Address,
    Envelope,
    WireError,
    control_frame,
    envelope_frame,
    envelope_from_frame,
    parse_frame,
)

SYS_PREFIX = "sys/"


class ActorError(Exception):
    pass


class DuplicateName(ActorError):
    pass


class UnknownDestination(ActorError):
    pass


class UnknownId(ActorError):
    pass


class Timeout(ActorError):
    pass


class ResourceExhausted(ActorError):
    pass


# -- descriptors ---------------------------------------------------------------

@dataclass(frozen=True)
class RestartPolicy:
    kind: str = "on_failure"  # never | on_failure | always
    max_attempts: int = 3


@dataclass(frozen=True)
class ServiceDescriptor:
    service_name: str
    node_name: str
    kind: str
    heartbeat_interval: float = 1.0
    restart_policy: RestartPolicy = RestartPolicy()
    inbox_limit: int | None = None  # None: node default

    def validate(self) -> None:
        if self.heartbeat_interval < 0.010:
            raise ActorError("heartbeat interval must be >= 10 ms")
        if not self.service_name or not self.kind:
            raise ActorError("service name and kind are required")


@dataclass
class ErrorRecord:
    id: int
    origin: str  # node whose error manager assigned the id
    source: Address
    severity: str  # info | warning | error | fatal
    code: str
    text: str
    at: atoms.AtomTimestamp
    acknowledged: bool = False

    @property
    def error_id(self) -> tuple[str, int]:
        return (self.origin, self.id)

    def to_obj(self) -> dict:
        return {
            "id": self.id, "origin": self.origin,
            "source": self.source.as_list(), "severity": self.severity,
            "code": self.code, "text": self.text,
            "at": {"str": self.at.display, "tv_sec": self.at.epoch_seconds,
                   "tv_nsec": self.at.epoch_nanos, "clock": self.at.rf_clock or 0},
            "acknowledged": self.acknowledged,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "ErrorRecord":
        ts = obj["at"]
        return cls(
            id=obj["id"], origin=obj["origin"], source=Address(*obj["source"]),
            severity=obj["severity"], code=obj["code"], text=obj["text"],
            at=atoms.AtomTimestamp(ts["str"], ts["tv_sec"], ts["tv_nsec"],
                                   ts["clock"] or None),
            acknowledged=obj["acknowledged"],
        )


@dataclass
class Receipt:
    delivered_at: float  # monotonic seconds


@dataclass
class WatchRow:
    service: str
    node: str
    kind: str
    status: str
    restarts: int
    beat_age_s: float


# -- error manager ------------------------------------------------------------------

class ErrorManager:
    """Single concentrated point for the distributed system's errors."""

    def __init__(self, node: "Node"):
        self.node = node
        self._next_id = 1
        self._records: dict[tuple[str, int], ErrorRecord] = {}
        self.listeners: list = []

    def report(self, source: Address, severity: str, code: str, text: str,
               replicate: bool = True) -> tuple[str, int]:
        rec = ErrorRecord(
            id=self._next_id, origin=self.node.name, source=source,
            severity=severity, code=code, text=text, at=atoms.timestamp_now(),
        )
        self._next_id += 1
        self._store(rec)
        if replicate:
            self.node._broadcast_control("sys/error", record=rec.to_obj())
        return rec.error_id

    def _store(self, rec: ErrorRecord) -> None:
        if rec.error_id in self._records:
            return
        self._records[rec.error_id] = rec
        for listener in list(self.listeners):
            try:
                listener(rec)
            except Exception:
                pass

    def ingest_remote(self, obj: dict) -> None:
        self._store(ErrorRecord.from_obj(obj))

    def list(self, severity: str | None = None, origin: str | None = None,
             acknowledged: bool | None = None) -> list[ErrorRecord]:
        out = []
        for rec in self._records.values():
            if severity is not None and rec.severity != severity:
                continue
            if origin is not None and rec.origin != origin:
                continue
            if acknowledged is not None and rec.acknowledged != acknowledged:
                continue
            out.append(rec)
        return sorted(out, key=lambda r: (r.origin, r.id))

    def acknowledge(self, error_id: tuple[str, int], broadcast: bool = True) -> ErrorRecord:
        key = (error_id[0], int(error_id[1]))
        rec = self._records.get(key)
        if rec is None:
            raise UnknownId(str(error_id))
        rec.acknowledged = True
        if broadcast:
            self.node._broadcast_control("sys/error_ack", origin=key[0], id=key[1])
        return rec

    def clear_acknowledged(self) -> int:
        """Session maintenance; fatal records are never auto-cleared."""
        before = len(self._records)
        self._records = {
            k: r for k, r in self._records.items()
            if r.severity == "fatal" or not r.acknowledged
        }
        return before - len(self._records)


# -- guardian ---------------------------------------------------------------------

@dataclass
class ServiceHealth:
    last_heartbeat: float
    status: str = "alive"  # alive | late | dead
    restarts: int = 0


@dataclass
class PeerHealth:
    last_peer_beat: float
    status: str = "alive"


@dataclass(frozen=True)
class Verdict:
    subject: str  # service name or peer node name
    scope: str  # "service" | "peer"
    transition: str  # e.g. "alive->dead"


class Guardian:
    """Per-node root actor: watches local services and peer Guardians."""

    LATE_FACTOR = 1.5

    def __init__(self, node: "Node", dead_threshold: int = 3,
                 peer_interval: float = 1.0, restart_backoff_base: float = 1.0):
        self.node = node
        self.dead_threshold = dead_threshold
        self.peer_interval = peer_interval
        self.restart_backoff_base = restart_backoff_base
        self.services: dict[str, ServiceHealth] = {}
        self.peers: dict[str, PeerHealth] = {}

    def note_beat(self, service: str) -> None:
        health = self.services.get(service)
        if health is None:
            return
        health.last_heartbeat = time.monotonic()
        if health.status != "alive":
            health.status = "alive"

    def note_peer_beat(self, node_name: str) -> None:
        health = self.peers.setdefault(node_name, PeerHealth(time.monotonic()))
        health.last_peer_beat = time.monotonic()
        if health.status != "alive":
            health.status = "alive"
            self.node.errors.report(
                self.node.guardian_address, "info", "peer_recovered",
                f"peer guardian {node_name} is back")

    def drop_peer(self, node_name: str) -> None:
        self.peers.pop(node_name, None)

    def tick(self, now: float | None = None) -> list[Verdict]:
        now = time.monotonic() if now is None else now
        verdicts: list[Verdict] = []
        for name, runtime in list(self.node.services.items()):
            health = self.services.get(name)
            if health is None:
                continue
            interval = runtime.desc.heartbeat_interval
            age = now - health.last_heartbeat
            if age >= self.dead_threshold * interval:
                if health.status != "dead":
                    verdicts.append(Verdict(name, "service", f"{health.status}->dead"))
                    health.status = "dead"
                    self.node.errors.report(
                        self.node.guardian_address, "error", "service_dead",
                        f"service {name} missed {self.dead_threshold} heartbeats")
                    self.node._consider_restart(name)
            elif age >= self.LATE_FACTOR * interval:
                if health.status == "alive":
                    health.status = "late"
                    verdicts.append(Verdict(name, "service", "alive->late"))
        for node_name, health in self.peers.items():
            age = now - health.last_peer_beat
            if age >= self.dead_threshold * self.peer_interval:
                if health.status != "dead":
                    health.status = "dead"
                    verdicts.append(Verdict(node_name, "peer", "alive->dead"))
                    self.node.errors.report(
                        self.node.guardian_address, "error", "peer_dead",
                        f"peer guardian {node_name} stopped beating")
        return verdicts

    def table(self) -> list[WatchRow]:
        now = time.monotonic()
        rows = []
        for name, health in sorted(self.services.items()):
            runtime = self.node.services.get(name)
            rows.append(WatchRow(
                service=name, node=self.node.name,
                kind=runtime.desc.kind if runtime else "?",
                status=health.status, restarts=health.restarts,
                beat_age_s=round(now - health.last_heartbeat, 3),
            ))
        return rows


# -- service runtime -------------------------------------------------------------------

@dataclass
class ServiceRuntime:
    desc: ServiceDescriptor
    behavior: object  # async callable(ctx, envelope) -> reply payload | None
    inbox: asyncio.Queue
    task: asyncio.Task | None = None
    beat_task: asyncio.Task | None = None
    running: bool = False
    restart_attempts: int = 0


class ServiceContext:
    """What a behavior sees: its own identity plus node messaging APIs."""

    def __init__(self, node: "Node", desc: ServiceDescriptor):
        self.node = node
        self.desc = desc
        self.address = Address(node.name, desc.service_name)

    async def call(self, dst: Address, kind: str, payload: atoms.DataAtom,
                   timeout: float = 2.0) -> atoms.DataAtom:
        return await self.node.call(dst, kind, payload, src_service=self.desc.service_name,
                                    timeout=timeout)

    async def send(self, dst: Address, kind: str, payload: atoms.DataAtom) -> Receipt:
        return await self.node.send_kind(dst, kind, payload,
                                         src_service=self.desc.service_name)

    def report_error(self, severity: str, code: str, text: str):
        return self.node.errors.report(self.address, severity, code, text)


class ServiceHandle:
    def __init__(self, node: "Node", name: str):
        self.node = node
        self.name = name

    @property
    def alive(self) -> bool:
        runtime = self.node.services.get(self.name)
        return bool(runtime and runtime.running)

    def kill(self) -> None:
        """Fault injection: stop the actor without telling the Guardian."""
        self.node._halt_service(self.name)


# -- peer connection ---------------------------------------------------------------------

class PeerLink:
    def __init__(self, node: "Node", reader: asyncio.StreamReader,
                 writer: asyncio.StreamWriter, peer_name: str | None = None):
        self.node = node
        self.reader = reader
        self.writer = writer
        self.peer_name = peer_name
        self.blackholed = False
        self.read_task: asyncio.Task | None = None

    def write_frame(self, frame: bytes) -> None:
        if self.blackholed or self.writer.is_closing():
            return
        self.writer.write(frame)

    async def close(self) -> None:
        if self.read_task:
            self.read_task.cancel()
        try:
            self.writer.close()
            await self.writer.wait_closed()
        except (ConnectionError, OSError):
            pass


# -- the node -------------------------------------------------------------------------------

class Node:
    """One machine of the distributed system: service host, Guardian, bus."""

    def __init__(self, name: str, port: int | None = None,
                 dead_threshold: int = 3, guardian_tick_interval: float = 0.1,
                 peer_interval: float = 1.0, restart_backoff_base: float = 1.0,
                 inbox_limit: int = 1000):
        self.name = name
        self.port = port
        self.inbox_limit = inbox_limit
        self.services: dict[str, ServiceRuntime] = {}
        self.handles: dict[str, ServiceHandle] = {}
        self.guardian = Guardian(self, dead_threshold, peer_interval, restart_backoff_base)
        self.errors = ErrorManager(self)
        self.guardian_address = Address(name, "guardian")
        self.peers: dict[str, PeerLink] = {}
        self._env_counter = 0
        self._pending_acks: dict[tuple[str, int], asyncio.Future] = {}
        self._pending_replies: dict[tuple[str, int], asyncio.Future] = {}
        self._dedup_highwater: dict[tuple[str, str], int] = {}
        self._server: asyncio.base_events.Server | None = None
        self._tasks: list[asyncio.Task] = []
        self._tick_interval = guardian_tick_interval
        self._running = False

    # -- lifecycle ------------------------------------------------------------

    async def start(self) -> "Node":
        self._running = True
        if self.port is not None:
            self._server = await asyncio.start_server(
                self._accept_peer, host="127.0.0.1", port=self.port)
        self._tasks.append(asyncio.create_task(self._guardian_loop()))
        self._tasks.append(asyncio.create_task(self._peer_beat_loop()))
        return self

    async def stop(self) -> None:
        self._running = False
        for name in list(self.services):
            self._halt_service(name)
        for task in self._tasks:
            task.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        self._tasks.clear()
        for link in list(self.peers.values()):
            await link.close()
        self.peers.clear()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None

    async def _guardian_loop(self) -> None:
        while self._running:
            await asyncio.sleep(self._tick_interval)
            self.guardian.tick()

    async def _peer_beat_loop(self) -> None:
        while self._running:
            self._broadcast_control("sys/peer_beat", node=self.name)
            await asyncio.sleep(self.guardian.peer_interval)

    # -- services ----------------------------------------------------------------

    async def spawn(self, desc: ServiceDescriptor, behavior) -> ServiceHandle:
        desc.validate()
        if desc.node_name != self.name:
            desc = replace(desc, node_name=self.name)
        if desc.service_name in self.services:
            raise DuplicateName(desc.service_name)
        runtime = ServiceRuntime(
            desc=desc, behavior=behavior,
            inbox=asyncio.Queue(maxsize=desc.inbox_limit or self.inbox_limit))
        self.services[desc.service_name] = runtime
        self.guardian.services[desc.service_name] = ServiceHealth(time.monotonic())
        self._start_runtime(runtime)
        handle = ServiceHandle(self, desc.service_name)
        self.handles[desc.service_name] = handle
        return handle

    def _start_runtime(self, runtime: ServiceRuntime) -> None:
        runtime.running = True
        runtime.task = asyncio.create_task(self._service_loop(runtime))
        runtime.beat_task = asyncio.create_task(self._beat_loop(runtime))

    async def _beat_loop(self, runtime: ServiceRuntime) -> None:
        ctx_addr = Address(self.name, runtime.desc.service_name)
        while runtime.running:
            env = Envelope(
                id=0, src=ctx_addr, dst=ctx_addr, kind="sys/beat",
                payload=atoms.atom("beat", atoms.boolean(True)), sent_at=atoms.timestamp_now())
            try:
                runtime.inbox.put_nowait(env)
            except asyncio.QueueFull:
                pass  # a clogged inbox must read as missed beats
            await asyncio.sleep(runtime.desc.heartbeat_interval)

    async def _service_loop(self, runtime: ServiceRuntime) -> None:
        ctx = ServiceContext(self, runtime.desc)
        name = runtime.desc.service_name
        while runtime.running:
            env = await runtime.inbox.get()
            if env.kind == "sys/beat":
                self.guardian.note_beat(name)
                continue
            try:
                result = runtime.behavior(ctx, env)
                reply = await result if asyncio.iscoroutine(result) else result
            except asyncio.CancelledError:
                raise
            except Exception as e:
                self.errors.report(ctx.address, "error", "service_crash",
                                   f"{name} crashed on {env.kind!r}: {e}")
                runtime.running = False
                if runtime.beat_task:
                    runtime.beat_task.cancel()
                return
            if reply is not None and env.kind != "sys/reply":
                payload = reply if isinstance(reply, atoms.DataAtom) else atoms.atom(
                    "reply", atoms.python_to_payload(reply))
                await self._send_envelope(Envelope(
                    id=self._next_env_id(), src=ctx.address, dst=env.src,
                    kind="sys/reply", payload=payload,
                    sent_at=atoms.timestamp_now(), reply_to=env.id))

    def _halt_service(self, name: str) -> None:
        runtime = self.services.get(name)
        if runtime is None:
            return
        runtime.running = False
        for task in (runtime.task, runtime.beat_task):
            if task:
                task.cancel()

    def _consider_restart(self, name: str) -> None:
        runtime = self.services.get(name)
        if runtime is None:
            return
        policy = runtime.desc.restart_policy
        if policy.kind == "never":
            return
        if policy.kind == "on_failure" and runtime.restart_attempts >= policy.max_attempts:
            self.errors.report(
                self.guardian_address, "warning", "restarts_exhausted",
                f"service {name} exceeded {policy.max_attempts} restart attempts")
            return
        backoff = self.guardian.restart_backoff_base * (2 ** runtime.restart_attempts)
        runtime.restart_attempts += 1
        self._tasks.append(asyncio.create_task(self._restart_later(name, backoff)))

    async def _restart_later(self, name: str, backoff: float) -> None:
        await asyncio.sleep(backoff)
        runtime = self.services.get(name)
        if runtime is None or runtime.running or not self._running:
            return
        self._halt_service(name)
        health = self.guardian.services.get(name)
        if health:
            health.restarts += 1
            health.status = "alive"
            health.last_heartbeat = time.monotonic()
        self._start_runtime(runtime)
        self.errors.report(self.guardian_address, "info", "service_restarted",
                           f"service {name} restarted (inbox preserved)")

    # -- messaging -----------------------------------------------------------------

    def _next_env_id(self) -> int:
        self._env_counter += 1
        return self._env_counter

    def address_of(self, service: str, node: str | None = None) -> Address:
        return Address(node or self.name, service)

    async def send_kind(self, dst: Address, kind: str, payload: atoms.DataAtom,
                        src_service: str = "node") -> Receipt:
        env = Envelope(
            id=self._next_env_id(), src=Address(self.name, src_service), dst=dst,
            kind=kind, payload=payload, sent_at=atoms.timestamp_now())
        return await self._send_envelope(env)

    async def send(self, env: Envelope) -> Receipt:
        return await self._send_envelope(env)

    async def _send_envelope(self, env: Envelope) -> Receipt:
        env.validate()
        if env.dst.node == self.name:
            await self._deliver_local(env)
            return Receipt(delivered_at=time.monotonic())
        link = self.peers.get(env.dst.node)
        if link is None:
            raise UnknownDestination(f"no link to node {env.dst.node!r}")
        key = (env.src.service, env.id)
        future: asyncio.Future = asyncio.get_running_loop().create_future()
        self._pending_acks[key] = future
        frame = envelope_frame(env)
        link.write_frame(frame)
        try:
            try:
                result = await asyncio.wait_for(asyncio.shield(future), timeout=1.0)
            except asyncio.TimeoutError:
                link.write_frame(frame)  # one retransmit; receiver dedups
                result = await asyncio.wait_for(future, timeout=1.0)
            if isinstance(result, Exception):
                raise result
            return Receipt(delivered_at=time.monotonic())
        except asyncio.TimeoutError:
            raise Timeout(f"no ack from {env.dst.node} within 2 s") from None
        finally:
            self._pending_acks.pop(key, None)

    def _resolve_reply(self, env: Envelope) -> bool:
        if env.kind == "sys/reply" and env.reply_to is not None:
            future = self._pending_replies.pop((env.dst.service, env.reply_to), None)
            if future and not future.done():
                future.set_result(env.payload)
            return True
        return False

    def _lookup_runtime(self, env: Envelope) -> ServiceRuntime:
        runtime = self.services.get(env.dst.service)
        if runtime is None:
            raise UnknownDestination(f"{env.dst.service!r} is not registered on {self.name}")
        return runtime

    def _overflow(self, env: Envelope, runtime: ServiceRuntime) -> ResourceExhausted:
        self.errors.report(self.guardian_address, "error", "inbox_overflow",
                           f"inbox of {env.dst.service} exceeded {runtime.inbox.maxsize}")
        return ResourceExhausted(env.dst.service)

    async def _deliver_local(self, env: Envelope) -> None:
        if self._resolve_reply(env):
            return
        runtime = self._lookup_runtime(env)
        try:
            runtime.inbox.put_nowait(env)
            return
        except asyncio.QueueFull:
            pass
        if not runtime.running:
            # restarting or dead receiver: bounded queue, then explicit error
            raise self._overflow(env, runtime)
        try:
            # live receiver at capacity: backpressure keeps order and delivery
            await asyncio.wait_for(runtime.inbox.put(env), timeout=5.0)
        except asyncio.TimeoutError:
            raise self._overflow(env, runtime) from None

    def _deliver_remote_arrival(self, env: Envelope) -> None:
        if self._resolve_reply(env):
            return
        runtime = self._lookup_runtime(env)
        try:
            runtime.inbox.put_nowait(env)
        except asyncio.QueueFull:
            raise self._overflow(env, runtime) from None

    async def call(self, dst: Address, kind: str, payload: atoms.DataAtom,
                   src_service: str = "node", timeout: float = 2.0) -> atoms.DataAtom:
        env = Envelope(
            id=self._next_env_id(), src=Address(self.name, src_service), dst=dst,
            kind=kind, payload=payload, sent_at=atoms.timestamp_now())
        future: asyncio.Future = asyncio.get_running_loop().create_future()
        self._pending_replies[(env.src.service, env.id)] = future
        try:
            await self._send_envelope(env)
            return await asyncio.wait_for(future, timeout=timeout)
        except asyncio.TimeoutError:
            raise Timeout(f"no reply from {dst.node}/{dst.service} "
                          f"to {kind!r} within {timeout} s") from None
        finally:
            self._pending_replies.pop((env.src.service, env.id), None)

    # -- peer links ----------------------------------------------------------------

    async def connect(self, host: str, port: int) -> str:
        reader, writer = await asyncio.open_connection(host, port)
        link = PeerLink(self, reader, writer)
        link.write_frame(control_frame("sys/hello", node=self.name,
                                       version=PROTOCOL_VERSION))
        line = await asyncio.wait_for(reader.readline(), timeout=2.0)
        obj = parse_frame(line)
        if obj.get("kind") != "sys/hello" or obj.get("version") != PROTOCOL_VERSION:
            await link.close()
            raise WireError("peer handshake failed")
        link.peer_name = obj["node"]
        self._register_link(link)
        return link.peer_name

    async def _accept_peer(self, reader: asyncio.StreamReader,
                           writer: asyncio.StreamWriter) -> None:
        link = PeerLink(self, reader, writer)
        try:
            line = await asyncio.wait_for(reader.readline(), timeout=5.0)
            obj = parse_frame(line)
            if obj.get("kind") != "sys/hello" or obj.get("version") != PROTOCOL_VERSION:
                raise WireError("peer handshake failed")
        except (WireError, asyncio.TimeoutError):
            writer.close()
            return
        link.peer_name = obj["node"]
        link.write_frame(control_frame("sys/hello", node=self.name,
                                       version=PROTOCOL_VERSION))
        self._register_link(link)

    def _register_link(self, link: PeerLink) -> None:
        old = self.peers.get(link.peer_name)
        if old is not None and old.read_task:
            old.read_task.cancel()
        self.peers[link.peer_name] = link
        self.guardian.note_peer_beat(link.peer_name)
        link.read_task = asyncio.create_task(self._read_loop(link))
        self._tasks.append(link.read_task)

    async def _read_loop(self, link: PeerLink) -> None:
        while True:
            try:
                line = await link.reader.readline()
            except (ConnectionError, OSError, asyncio.CancelledError):
                return
            if not line:
                return
            if link.blackholed:
                continue  # partition simulation swallows inbound traffic too
            try:
                obj = parse_frame(line)
            except WireError:
                continue
            try:
                self._dispatch_frame(link, obj)
            except Exception:
                continue

    def _dispatch_frame(self, link: PeerLink, obj: dict) -> None:
        if obj["frame"] == "control":
            kind = obj["kind"]
            if kind == "sys/peer_beat":
                self.guardian.note_peer_beat(obj["node"])
            elif kind == "sys/ack":
                future = self._pending_acks.get((obj["src_service"], obj["env_id"]))
                if future and not future.done():
                    future.set_result(True)
            elif kind == "sys/nack":
                future = self._pending_acks.get((obj["src_service"], obj["env_id"]))
                if future and not future.done():
                    future.set_result(UnknownDestination(obj.get("reason", "nack")))
            elif kind == "sys/error":
                self.errors.ingest_remote(obj["record"])
            elif kind == "sys/error_ack":
                try:
                    self.errors.acknowledge((obj["origin"], obj["id"]), broadcast=False)
                except UnknownId:
                    pass
            return
        env = envelope_from_frame(obj)
        self.guardian.note_peer_beat(link.peer_name)  # traffic proves liveness
        if env.kind == "sys/reply" and env.reply_to is not None:
            link.write_frame(control_frame(
                "sys/ack", src_service=env.src.service, env_id=env.id))
            self._resolve_reply(env)
            return
        dedup_key = (env.src.node, env.src.service)
        if env.id <= self._dedup_highwater.get(dedup_key, 0):
            link.write_frame(control_frame(
                "sys/ack", src_service=env.src.service, env_id=env.id))
            return
        try:
            self._deliver_remote_arrival(env)
        except UnknownDestination:
            link.write_frame(control_frame(
                "sys/nack", src_service=env.src.service, env_id=env.id,
                reason=f"unknown service {env.dst.service!r}"))
            return
        except ResourceExhausted:
            link.write_frame(control_frame(
                "sys/nack", src_service=env.src.service, env_id=env.id,
                reason="inbox overflow"))
            return
        self._dedup_highwater[dedup_key] = env.id
        link.write_frame(control_frame(
            "sys/ack", src_service=env.src.service, env_id=env.id))

    def _broadcast_control(self, kind: str, **fields) -> None:
        for link in self.peers.values():
            link.write_frame(control_frame(kind, **fields))

    # -- fault injection (tests and drills) ----------------------------------------

    def sever(self, peer_name: str) -> None:
        link = self.peers.get(peer_name)
        if link:
            link.blackholed = True

    def heal(self, peer_name: str) -> None:
        link = self.peers.get(peer_name)
        if link:
            link.blackholed = False
