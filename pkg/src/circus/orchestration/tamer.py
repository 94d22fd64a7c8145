"""The Tamer: coordinates several Monkeys across disjoint crates."""

from __future__ import annotations

import asyncio

from .monkey import Monkey
from .schedule import ScheduleError

_DONE = object()


class Tamer:
    """Synchronous mode runs a barrier per entry index: no monkey starts entry
    k+1 until every monkey finished entry k. Independent mode free-runs."""

    def __init__(self, monkeys: list[Monkey], mode: str = "synchronous"):
        if mode not in ("synchronous", "independent"):
            raise ScheduleError(f"unknown coordination mode {mode!r}")
        crates = [m.crate_name for m in monkeys]
        if len(set(crates)) != len(crates):
            raise ScheduleError("monkeys must target disjoint crates")
        self.monkeys = monkeys
        self.mode = mode
        self.barrier_times: list[float] = []

    async def _pump(self, stream, crate_name: str, queue: asyncio.Queue) -> None:
        async for state, outcome in stream:
            await queue.put((crate_name, state, outcome))

    async def run(self):
        """Merged stream of (crate, MonkeyState, RunOutcome)."""
        queue: asyncio.Queue = asyncio.Queue()
        if self.mode == "independent":
            tasks = [asyncio.create_task(self._pump(m.run(), m.crate_name, queue))
                     for m in self.monkeys]
            async for item in self._drain(queue, tasks):
                yield item
            return
        n_entries = max(len(m.schedule.entries) for m in self.monkeys)
        loop = asyncio.get_running_loop()
        for entry_index in range(n_entries):
            self.barrier_times.append(loop.time())
            tasks = [
                asyncio.create_task(
                    self._pump(m.run_entry(entry_index), m.crate_name, queue))
                for m in self.monkeys if entry_index < len(m.schedule.entries)
            ]
            async for item in self._drain(queue, tasks):
                yield item
        for m in self.monkeys:
            m.state.mode = "finished"
            m._persist()

    async def _drain(self, queue: asyncio.Queue, tasks):
        pending = set(tasks)
        while pending or not queue.empty():
            get = asyncio.create_task(queue.get())
            done, _ = await asyncio.wait({get, *pending},
                                         return_when=asyncio.FIRST_COMPLETED)
            if get in done:
                yield get.result()
            else:
                get.cancel()
            for t in list(pending):
                if t.done():
                    t.result()  # surface FatalScript and friends
                    pending.discard(t)
