"""Self-contained gateway demo: one node, one monkey grinding a long scan,
periodic demo errors. The operator console's integration tests (and manual
console sessions) point at this.

    python -m circus.orchestration.demo --port 8741
"""

from __future__ import annotations

import argparse
import asyncio
import contextlib

from ..actors import Node, ServiceDescriptor
from ..scripts import ExperimentScript, RunOutcome
from ..services import echo_behavior
from .gateway import Gateway, OrchestrationHub
from .monkey import Monkey
from .schedule import ScanSpec, Schedule, ScheduleEntry


async def demo(port: int, token: str | None, error_every: float,
               point_delay: float, state_dir: str) -> None:
    node = await Node("demo", guardian_tick_interval=0.1).start()
    await node.spawn(
        ServiceDescriptor("echo", "demo", "Echo", heartbeat_interval=0.5),
        echo_behavior)

    async def runner(entry, params):
        await asyncio.sleep(point_delay)
        return RunOutcome("success")

    script = ExperimentScript("demo_scan", params={"a": 0.0, "b": 0.0}, body=[])
    scan = ScanSpec([("a", [float(i) for i in range(60)]),
                     ("b", [float(i) for i in range(60)])])
    monkey = Monkey(Schedule([ScheduleEntry(script, scan=scan)]), runner,
                    f"{state_dir}/demo_monkey.json", crate_name="crate0")
    submitted = []
    hub = OrchestrationHub(nodes=[node], monkeys=[monkey],
                           on_schedule=submitted.append)
    monkey.hub = hub
    gateway = Gateway(hub, token=token)
    bound = await gateway.start(port=port)
    print(f"gateway on http://127.0.0.1:{bound}", flush=True)

    async def error_ticker():
        n = 0
        while True:
            await asyncio.sleep(error_every)
            n += 1
            node.errors.report(node.guardian_address, "warning", "demo_error",
                               f"synthetic condition #{n}")

    async def drain():
        async for _ in monkey.run():
            pass

    ticker = asyncio.create_task(error_ticker())
    scan_task = asyncio.create_task(drain())
    try:
        await asyncio.Event().wait()
    finally:
        ticker.cancel()
        scan_task.cancel()
        with contextlib.suppress(asyncio.CancelledError):
            await scan_task
        await gateway.stop()
        await node.stop()


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--port", type=int, default=8741)
    parser.add_argument("--token", default=None)
    parser.add_argument("--error-every", type=float, default=2.0)
    parser.add_argument("--point-delay", type=float, default=0.25)
    parser.add_argument("--state-dir", default="/tmp")
    args = parser.parse_args(argv)
    try:
        asyncio.run(demo(args.port, args.token, args.error_every,
                         args.point_delay, args.state_dir))
    except KeyboardInterrupt:
        pass


if __name__ == "__main__":
    main()
