"""The Monkey: executes scheduled scripts and makes the retry/pause/feedback
decisions that keep a schedule running without an operator."""

from __future__ import annotations

import asyncio
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..pipeline import OptimizerExhausted, propose_parameters
from ..scripts import RunOutcome
from .schedule import Schedule, ScheduleError


class FatalScript(Exception):
    pass


class PreconditionUnsatisfiable(Exception):
    pass


@dataclass
class MonkeyState:
    entry_index: int = 0
    scan_index: int = 0
    repeat_index: int = 0
    mode: str = "running"  # running | paused | stopped | finished
    pause_reason: str | None = None
    retries_here: int = 0
    completed: list = field(default_factory=list)  # [entry, scan, repeat] triples

    @property
    def position(self):
        return (self.entry_index, self.scan_index, self.repeat_index)

    def snapshot(self) -> "MonkeyState":
        return MonkeyState(self.entry_index, self.scan_index, self.repeat_index,
                           self.mode, self.pause_reason, self.retries_here,
                           [list(c) for c in self.completed])

    def to_obj(self) -> dict:
        return {
            "entry_index": self.entry_index,
            "scan_index": self.scan_index,
            "repeat_index": self.repeat_index,
            "mode": self.mode,
            "pause_reason": self.pause_reason,
            "retries_here": self.retries_here,
            "completed": [list(c) for c in self.completed],
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "MonkeyState":
        return cls(obj["entry_index"], obj["scan_index"], obj["repeat_index"],
                   obj["mode"], obj.get("pause_reason"), obj.get("retries_here", 0),
                   [tuple(c) for c in obj.get("completed", [])])


def monkey_feedback_step(spec, history, script) -> dict:
    """Delegate to the analysis optimizer, then validate the proposal against
    the script's parameter schema."""
    params = propose_parameters(spec, history)
    unknown = set(params) - set(script.params)
    if unknown:
        raise ScheduleError(f"optimizer proposed unknown parameters {sorted(unknown)}")
    return params


class Monkey:
    """One executor per crate. ``runner`` runs one script attempt and returns
    its RunOutcome; ``precondition`` (optional) reports whether the machine is
    ready; ``feedback_value`` (optional) fetches the observable after a
    feedback-driven run."""

    def __init__(self, schedule: Schedule, runner, state_path: Path | str,
                 crate_name: str = "crate0", precondition=None,
                 feedback_value=None, max_retries: int = 3,
                 poll_interval: float = 10.0, max_polls: int | None = None,
                 hub=None):
        schedule.validate()
        self.schedule = schedule
        self.runner = runner
        self.state_path = Path(state_path)
        self.crate_name = crate_name
        self.precondition = precondition
        self.feedback_value = feedback_value
        self.max_retries = max_retries
        self.poll_interval = poll_interval
        self.max_polls = max_polls
        self.hub = hub
        self._operator_pause = asyncio.Event()
        self._abort = False
        self.entry_spans: dict[int, tuple[float, float]] = {}  # barrier bookkeeping
        if self.state_path.exists():
            self.state = MonkeyState.from_obj(json.loads(self.state_path.read_text()))
            if self.state.mode in ("paused", "running"):
                self.state.mode = "running"
                self.state.pause_reason = None
        else:
            self.state = MonkeyState()

    # -- operator controls -------------------------------------------------

    def pause(self) -> None:
        self._operator_pause.set()
        self._set_mode("paused", "operator")

    def resume(self) -> None:
        self._operator_pause.clear()
        if self.state.mode == "paused":
            self._set_mode("running", None)

    def abort(self) -> None:
        self._abort = True
        self._operator_pause.clear()

    # -- internals ------------------------------------------------------------

    def _set_mode(self, mode: str, reason: str | None) -> None:
        self.state.mode = mode
        self.state.pause_reason = reason
        self._persist()
        if self.hub is not None:
            self.hub.publish({"event": mode, "crate": self.crate_name,
                              "reason": reason})

    def _persist(self) -> None:
        self.state_path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.state_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.state.to_obj()))
        tmp.replace(self.state_path)

    async def _wait_while_operator_paused(self) -> None:
        while self._operator_pause.is_set() and not self._abort:
            await asyncio.sleep(0.01)

    async def _precondition_ok(self) -> bool:
        if self.precondition is None:
            return True
        result = self.precondition()
        return await result if asyncio.iscoroutine(result) else result

    async def _pause_until_ready(self, reason: str) -> None:
        """Autonomous pause: poll the precondition until the machine recovers."""
        self._set_mode("paused", reason)
        polls = 0
        while not self._abort:
            await self._wait_while_operator_paused()
            if await self._precondition_ok():
                break
            polls += 1
            if self.max_polls is not None and polls > self.max_polls:
                self._set_mode("stopped", reason)
                raise PreconditionUnsatisfiable(reason)
            await asyncio.sleep(self.poll_interval)
        self._set_mode("running", None)
        self.state.retries_here = 0

    # -- execution -------------------------------------------------------------

    async def run_entry(self, entry_index: int):
        """Run one schedule entry, yielding (state snapshot, outcome) per
        attempt; completed points land in state.completed exactly once."""
        entry = self.schedule.entries[entry_index]
        self.entry_spans[entry_index] = (time.monotonic(), float("nan"))
        if entry.feedback is not None:
            async for item in self._run_feedback_entry(entry_index, entry):
                yield item
        else:
            points = entry.scan.points() if entry.scan else [dict(entry.params)]
            for scan_index, point_params in enumerate(points):
                if self._abort:
                    break
                for repeat_index in range(entry.repeat):
                    key = (entry_index, scan_index, repeat_index)
                    if key in {tuple(c) for c in self.state.completed}:
                        continue  # restart resumes past completed points
                    self.state.entry_index = entry_index
                    self.state.scan_index = scan_index
                    self.state.repeat_index = repeat_index
                    params = {**entry.params, **point_params}
                    async for item in self._attempt_point(key, entry, params):
                        yield item
                    if self._abort:
                        break
                if self._abort:
                    break
        start, _ = self.entry_spans[entry_index]
        self.entry_spans[entry_index] = (start, time.monotonic())

    async def _attempt_point(self, key, entry, params):
        self.state.retries_here = 0
        while not self._abort:
            await self._wait_while_operator_paused()
            if self._abort:
                return
            if not await self._precondition_ok():
                await self._pause_until_ready("beam_empty")
                continue
            outcome: RunOutcome = await self.runner(entry, params)
            if outcome.status == "fatal":
                self._set_mode("stopped", outcome.reason)
                raise FatalScript(outcome.reason)
            if outcome.status == "success":
                self.state.completed.append(list(key))
                self.state.retries_here = 0
                self._persist()
                self._log_event("point", key, outcome)
                yield (self.state.snapshot(), outcome)
                return
            # retryable
            self.state.retries_here += 1
            self._persist()
            self._log_event("retry", key, outcome)
            yield (self.state.snapshot(), outcome)
            if self.state.retries_here > self.max_retries:
                await self._pause_until_ready(outcome.reason or "retryable")

    async def _run_feedback_entry(self, entry_index, entry):
        history = []
        scan_index = 0
        while not self._abort:
            try:
                params = monkey_feedback_step(entry.feedback, history, entry.script)
            except OptimizerExhausted:
                break
            key = (entry_index, scan_index, 0)
            self.state.entry_index = entry_index
            self.state.scan_index = scan_index
            merged = {**entry.params, **params}
            async for item in self._attempt_point(key, entry, merged):
                yield item
            if self.feedback_value is None:
                raise ScheduleError("feedback entry requires a feedback_value source")
            value = self.feedback_value(entry.feedback)
            value = await value if asyncio.iscoroutine(value) else value
            history.append((params, value))
            scan_index += 1

    async def run(self):
        """The full schedule as a stream of (MonkeyState, RunOutcome)."""
        try:
            for entry_index in range(len(self.schedule.entries)):
                if self._abort:
                    break
                async for item in self.run_entry(entry_index):
                    yield item
        finally:
            if self._abort:
                self._set_mode("stopped", self.state.pause_reason)
            elif self.state.mode != "stopped":
                self._set_mode("finished", None)

    def _log_event(self, kind: str, key, outcome: RunOutcome) -> None:
        if self.hub is not None:
            self.hub.publish({
                "event": kind, "crate": self.crate_name,
                "position": list(key), "status": outcome.status,
                "reason": outcome.reason,
            })
