"""Console gateway: the single HTTP surface operators (and the web console)
talk to. Snapshot on demand, commands with validation, and a newline-delimited
JSON event stream for live updates."""

from __future__ import annotations

import asyncio
import json
import os
import time
from collections import deque

from aiohttp import web

from .. import atoms
from .monkey import Monkey
from .schedule import ScheduleError, schedule_from_atom

LOG_TAIL = 200


class InvalidCommand(Exception):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class OrchestrationHub:
    """Aggregates nodes, monkeys and the live log; fans events out to
    subscribers (the gateway's event stream among them)."""

    def __init__(self, nodes=None, monkeys=None, on_schedule=None):
        self.nodes = list(nodes or [])
        self.monkeys: dict[str, Monkey] = {m.crate_name: m for m in (monkeys or [])}
        self.on_schedule = on_schedule
        self.log: deque = deque(maxlen=LOG_TAIL)
        self.active_run: str | None = None
        self._subscribers: list[asyncio.Queue] = []
        for node in self.nodes:
            node.errors.listeners.append(self._on_error_record)

    def add_monkey(self, monkey: Monkey) -> None:
        self.monkeys[monkey.crate_name] = monkey
        monkey.hub = self

    def _on_error_record(self, record) -> None:
        self.publish({"event": "error", "record": record.to_obj()})

    def publish(self, event: dict) -> None:
        event = dict(event)
        event.setdefault("at", time.time())
        self.log.append(self._format_log_line(event))
        for queue in list(self._subscribers):
            try:
                queue.put_nowait(event)
            except asyncio.QueueFull:
                pass

    def log_line(self, message: str) -> None:
        self.publish({"event": "log", "message": message})

    @staticmethod
    def _format_log_line(event: dict) -> str:
        stamp = time.strftime("%H:%M:%S", time.localtime(event["at"]))
        body = event.get("message") or json.dumps(
            {k: v for k, v in event.items() if k not in ("at",)}, sort_keys=True)
        return f"{stamp} {body}"

    def subscribe(self) -> asyncio.Queue:
        queue: asyncio.Queue = asyncio.Queue(maxsize=10_000)
        self._subscribers.append(queue)
        return queue

    def unsubscribe(self, queue: asyncio.Queue) -> None:
        if queue in self._subscribers:
            self._subscribers.remove(queue)

    # -- snapshot ------------------------------------------------------------

    def snapshot(self) -> dict:
        guardians = []
        errors = []
        for node in self.nodes:
            for row in node.guardian.table():
                guardians.append({
                    "node": row.node, "service": row.service, "kind": row.kind,
                    "status": row.status, "restarts": row.restarts,
                    "beat_age_s": row.beat_age_s,
                })
            for peer, health in sorted(node.guardian.peers.items()):
                guardians.append({
                    "node": node.name, "service": f"peer:{peer}", "kind": "Guardian",
                    "status": health.status, "restarts": 0,
                    "beat_age_s": round(time.monotonic() - health.last_peer_beat, 3),
                })
        seen = set()
        for node in self.nodes:
            for rec in node.errors.list():
                if rec.error_id in seen:
                    continue
                seen.add(rec.error_id)
                errors.append(rec.to_obj())
        monkeys = []
        for crate, monkey in sorted(self.monkeys.items()):
            entry = state = monkey.state
            total = 0
            if state.entry_index < len(monkey.schedule.entries):
                sched_entry = monkey.schedule.entries[state.entry_index]
                total = sched_entry.scan.total_points if sched_entry.scan else 1
            monkeys.append({
                "crate": crate,
                "mode": state.mode,
                "pause_reason": state.pause_reason,
                "entry_index": state.entry_index,
                "scan_index": state.scan_index,
                "repeat_index": state.repeat_index,
                "retries_here": state.retries_here,
                "completed_points": len(state.completed),
                "entry_total_points": total,
            })
        return {
            "guardians": guardians,
            "errors": errors,
            "monkeys": monkeys,
            "log_tail": list(self.log),
            "active_run": self.active_run,
            "taken_at": time.time(),
        }

    # -- commands ----------------------------------------------------------------

    def _monkey_for(self, payload: dict) -> Monkey:
        crate = payload.get("crate")
        if crate is None:
            if len(self.monkeys) != 1:
                raise InvalidCommand("crate is required with several monkeys", "crate")
            return next(iter(self.monkeys.values()))
        monkey = self.monkeys.get(crate)
        if monkey is None:
            raise InvalidCommand(f"unknown crate {crate!r}", "crate")
        return monkey

    def command(self, payload: dict) -> dict:
        if not isinstance(payload, dict) or "command" not in payload:
            raise InvalidCommand("body must be an object with a 'command' key", "command")
        command = payload["command"]
        if command == "pause":
            self._monkey_for(payload).pause()
            return {"ok": True, "command": "pause"}
        if command == "resume":
            self._monkey_for(payload).resume()
            return {"ok": True, "command": "resume"}
        if command == "abort":
            self._monkey_for(payload).abort()
            return {"ok": True, "command": "abort"}
        if command == "acknowledge_error":
            try:
                origin, error_id = payload["origin"], int(payload["id"])
            except (KeyError, TypeError, ValueError):
                raise InvalidCommand("acknowledge_error needs origin and id", "id") from None
            for node in self.nodes:
                try:
                    node.errors.acknowledge((origin, error_id))
                    self.publish({"event": "error_acknowledged",
                                  "origin": origin, "id": error_id})
                    return {"ok": True, "command": "acknowledge_error"}
                except Exception:
                    continue
            raise InvalidCommand(f"unknown error id {origin}/{error_id}", "id")
        if command == "submit_schedule":
            doc = payload.get("schedule")
            if doc is None:
                raise InvalidCommand("submit_schedule needs a schedule document", "schedule")
            try:
                schedule = schedule_from_atom(atoms.obj_to_atom(doc))
            except (atoms.AtomError, ScheduleError) as e:
                raise InvalidCommand(f"schedule invalid: {e}", "schedule") from None
            if self.on_schedule is None:
                raise InvalidCommand("no schedule executor attached", "schedule")
            self.on_schedule(schedule)
            self.publish({"event": "schedule_submitted",
                          "entries": len(schedule.entries)})
            return {"ok": True, "command": "submit_schedule",
                    "entries": len(schedule.entries)}
        raise InvalidCommand(f"unknown command {command!r}", "command")


class Gateway:
    """GET /v1/snapshot, POST /v1/command, GET /v1/events (ndjson stream)."""

    def __init__(self, hub: OrchestrationHub, token: str | None = None):
        self.hub = hub
        self.token = token if token is not None else os.environ.get(
            "CIRCUS_CONSOLE_TOKEN") or None
        self.app = web.Application()
        self.app.router.add_get("/v1/snapshot", self._snapshot)
        self.app.router.add_post("/v1/command", self._command)
        self.app.router.add_get("/v1/events", self._events)
        self._runner: web.AppRunner | None = None
        self.port: int | None = None

    def _authorized(self, request: web.Request) -> bool:
        if self.token is None:
            return True
        return request.headers.get("Authorization") == f"Bearer {self.token}"

    async def _snapshot(self, request: web.Request) -> web.Response:
        if not self._authorized(request):
            return web.json_response({"error": "unauthorized"}, status=401)
        return web.json_response(self.hub.snapshot())

    async def _command(self, request: web.Request) -> web.Response:
        if not self._authorized(request):
            return web.json_response({"error": "unauthorized"}, status=401)
        try:
            payload = await request.json()
        except json.JSONDecodeError:
            return web.json_response(
                {"error": "body is not JSON", "field": None}, status=400)
        try:
            result = self.hub.command(payload)
        except InvalidCommand as e:
            return web.json_response({"error": str(e), "field": e.field}, status=400)
        return web.json_response(result)

    async def _events(self, request: web.Request) -> web.StreamResponse:
        if not self._authorized(request):
            return web.json_response({"error": "unauthorized"}, status=401)
        response = web.StreamResponse(headers={
            "Content-Type": "application/x-ndjson",
            "Cache-Control": "no-cache",
        })
        await response.prepare(request)
        queue = self.hub.subscribe()
        try:
            await response.write(
                json.dumps({"event": "hello", "at": time.time()}).encode() + b"\n")
            while True:
                event = await queue.get()
                await response.write(json.dumps(event).encode() + b"\n")
        except (ConnectionResetError, asyncio.CancelledError):
            pass
        finally:
            self.hub.unsubscribe(queue)
        return response

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> int:
        self._runner = web.AppRunner(self.app)
        await self._runner.setup()
        site = web.TCPSite(self._runner, host, port)
        await site.start()
        self.port = site._server.sockets[0].getsockname()[1]
        return self.port

    async def stop(self) -> None:
        if self._runner is not None:
            await self._runner.cleanup()
            self._runner = None
