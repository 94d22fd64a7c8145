"""Node daemon: run one bus node from the command line.

    circus-node --name beta --port 4462 --echo

The port honors CIRCUS_PORT when --port is not given. With --data-root the
daemon also hosts a DAQ Manager service over that storage root.
"""

from __future__ import annotations

import argparse
import asyncio
import os
import signal

from .actors import Node
from .actors.wire import DEFAULT_PORT
from .daq import DaqStore
from .services import spawn_standard


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="circus-node", description=__doc__)
    parser.add_argument("--name", required=True, help="node name on the bus")
    parser.add_argument("--port", type=int,
                        default=int(os.environ.get("CIRCUS_PORT", DEFAULT_PORT)))
    parser.add_argument("--connect", action="append", default=[],
                        metavar="HOST:PORT", help="peer node to dial at startup")
    parser.add_argument("--echo", action="store_true", help="host an echo service")
    parser.add_argument("--data-root", default=None,
                        help="host a DAQ manager over this storage root")
    parser.add_argument("--heartbeat", type=float, default=1.0,
                        help="service heartbeat interval in seconds")
    return parser


async def run(args) -> None:
    node = Node(args.name, port=args.port)
    await node.start()
    store = DaqStore(args.data_root) if args.data_root else None
    if args.echo or store:
        await spawn_standard(node, store=store, heartbeat_interval=args.heartbeat)
    for target in args.connect:
        host, _, port = target.rpartition(":")
        await node.connect(host or "127.0.0.1", int(port))
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, stop.set)
    print(f"node {args.name} listening on {args.port}", flush=True)
    await stop.wait()
    await node.stop()


def main(argv=None) -> None:
    asyncio.run(run(build_parser().parse_args(argv)))


if __name__ == "__main__":
    main()
