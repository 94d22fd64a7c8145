"""Orchestration: schedules, the Monkey executor, the Tamer coordinator and
the console gateway."""

from ..scripts import build_and_init, run_script
from .gateway import Gateway, InvalidCommand, OrchestrationHub
from .monkey import (
    FatalScript,
    Monkey,
    MonkeyState,
    PreconditionUnsatisfiable,
    monkey_feedback_step,
)
from .schedule import (
    ScanSpec,
    Schedule,
    ScheduleEntry,
    ScheduleError,
    schedule_from_atom,
    schedule_to_atom,
)
from .tamer import Tamer

__all__ = [
    "FatalScript", "Gateway", "InvalidCommand", "Monkey", "MonkeyState",
    "OrchestrationHub", "PreconditionUnsatisfiable", "ScanSpec", "Schedule",
    "ScheduleEntry", "ScheduleError", "Tamer", "make_script_runner",
    "monkey_feedback_step", "schedule_from_atom", "schedule_to_atom",
]


def make_script_runner(crate, node=None, daq_store=None, daq_run=None,
                       calibration=None):
    """Default Monkey runner: init the crate context and run the entry's
    script with the point's parameters."""

    async def runner(entry, params):
        ctx = build_and_init(entry.script, crate, node=node, calibration=calibration,
                             daq_store=daq_store, daq_run=daq_run)
        return await run_script(entry.script, ctx, params)

    return runner
