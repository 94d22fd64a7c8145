"""Schedules: ordered entries of scripts with parameters, scans and feedback."""

from __future__ import annotations

from dataclasses import dataclass, field

from .. import atoms
from ..pipeline import FeedbackSpec
from ..scripts import ExperimentScript, Quantity, script_from_atom, script_to_atom

SCHEDULE_VERSION = "1"
MAX_SCAN_DIMS = 4


class ScheduleError(Exception):
    pass


@dataclass
class ScanSpec:
    dims: list  # [(param name, [values])]
    order: str = "snake"

    def validate(self, script: ExperimentScript) -> None:
        if not 1 <= len(self.dims) <= MAX_SCAN_DIMS:
            raise ScheduleError(f"scans support 1-{MAX_SCAN_DIMS} dimensions")
        if self.order not in ("snake", "lexicographic"):
            raise ScheduleError(f"unknown scan order {self.order!r}")
        for name, values in self.dims:
            if name not in script.params:
                raise ScheduleError(f"scan parameter {name!r} not in script params")
            if not values:
                raise ScheduleError(f"scan dimension {name!r} is empty")

    @property
    def total_points(self) -> int:
        n = 1
        for _, values in self.dims:
            n *= len(values)
        return n

    def points(self) -> list[dict]:
        """Parameter bindings in scan order. Snake order reverses each inner
        block on odd parent steps so consecutive points move one knob."""
        def expand(dims):
            if not dims:
                return [{}]
            name, values = dims[0]
            inner = expand(dims[1:])
            out = []
            for i, v in enumerate(values):
                block = inner if (self.order == "lexicographic" or i % 2 == 0) \
                    else list(reversed(inner))
                out.extend({name: v, **rest} for rest in block)
            return out

        return expand(self.dims)


@dataclass
class ScheduleEntry:
    script: ExperimentScript
    params: dict = field(default_factory=dict)
    repeat: int = 1
    scan: ScanSpec | None = None
    feedback: FeedbackSpec | None = None

    def validate(self) -> None:
        if self.repeat < 1:
            raise ScheduleError("repeat must be >= 1")
        for name in self.params:
            if name not in self.script.params:
                raise ScheduleError(f"override {name!r} not in script params")
        if self.scan is not None:
            self.scan.validate(self.script)
        if self.feedback is not None and self.feedback.budget < 1:
            raise ScheduleError("feedback budget must be >= 1")


@dataclass
class Schedule:
    entries: list
    created_by: str = "operator"
    created_at: atoms.AtomTimestamp = field(default_factory=atoms.timestamp_now)

    def validate(self) -> None:
        if not self.entries:
            raise ScheduleError("schedule must contain at least one entry")
        for entry in self.entries:
            entry.validate()


# -- interchange serialization ----------------------------------------------------

def _value_payload(v):
    if isinstance(v, Quantity):
        return atoms.cluster(value=atoms.f64(v.value), unit=atoms.text(v.unit))
    return atoms.python_to_payload(v)


def _payload_value(p):
    if isinstance(p, atoms.Cluster) and "unit" in p and "value" in p:
        return Quantity(p.get("value").value, p.get("unit").value)
    return atoms.payload_to_python(p)


def _feedback_to_cluster(fb: FeedbackSpec) -> atoms.Cluster:
    items = [
        ("observable", atoms.text(fb.observable)),
        ("objective", atoms.text(fb.objective)),
        ("optimizer", atoms.text(fb.optimizer)),
        ("budget", atoms.i32(fb.budget)),
    ]
    if fb.target_value is not None:
        items.append(("target_value", atoms.f64(fb.target_value)))
    if "bounds" in fb.settings:
        items.append(("bounds", atoms.cluster_items(
            (k, atoms.f64_array(v)) for k, v in fb.settings["bounds"].items())))
    if "grid" in fb.settings:
        items.append(("grid", atoms.cluster_items(
            (k, atoms.f64_array(v)) for k, v in fb.settings["grid"].items())))
    return atoms.cluster_items(items)


def _feedback_from_cluster(c: atoms.Cluster) -> FeedbackSpec:
    settings = {}
    if "bounds" in c:
        settings["bounds"] = {k: tuple(v.values) for k, v in c.get("bounds").fields}
    if "grid" in c:
        settings["grid"] = {k: list(v.values) for k, v in c.get("grid").fields}
    return FeedbackSpec(
        observable=c.get("observable").value,
        objective=c.get("objective").value,
        target_value=c.get("target_value").value if "target_value" in c else None,
        optimizer=c.get("optimizer").value,
        settings=settings,
        budget=c.get("budget").value,
    )


def schedule_to_atom(schedule: Schedule) -> atoms.DataAtom:
    entries = []
    for i, entry in enumerate(schedule.entries):
        items = [
            ("script", script_to_atom(entry.script).data),
            ("params", atoms.cluster_items(
                (k, _value_payload(v)) for k, v in entry.params.items())),
            ("repeat", atoms.i32(entry.repeat)),
        ]
        if entry.scan is not None:
            items.append(("scan", atoms.cluster(
                order=atoms.text(entry.scan.order),
                dims=atoms.cluster_items(
                    (f"d{j:03d}", atoms.cluster(
                        param=atoms.text(name),
                        values=atoms.f64_array(values)))
                    for j, (name, values) in enumerate(entry.scan.dims)),
            )))
        if entry.feedback is not None:
            items.append(("feedback", _feedback_to_cluster(entry.feedback)))
        entries.append((f"e{i:03d}", atoms.cluster_items(items)))
    return atoms.atom("schedule", atoms.cluster(
        schedule_set=atoms.text(SCHEDULE_VERSION),
        created_by=atoms.text(schedule.created_by),
        entries=atoms.cluster_items(entries),
    ), schedule.created_at)


def schedule_from_atom(a: atoms.DataAtom) -> Schedule:
    c = a.data
    if c.get("schedule_set").value != SCHEDULE_VERSION:
        raise ScheduleError(f"unsupported schedule version {c.get('schedule_set').value!r}")
    entries = []
    for _, e in c.get("entries").fields:
        script_atom = atoms.DataAtom("script/embedded", a.timestamp, e.get("script"))
        entry = ScheduleEntry(
            script=script_from_atom(script_atom),
            params={k: _payload_value(v) for k, v in e.get("params").fields},
            repeat=e.get("repeat").value,
        )
        if "scan" in e:
            s = e.get("scan")
            entry.scan = ScanSpec(
                dims=[(d.get("param").value, list(d.get("values").values))
                      for _, d in s.get("dims").fields],
                order=s.get("order").value,
            )
        if "feedback" in e:
            entry.feedback = _feedback_from_cluster(e.get("feedback"))
        entries.append(entry)
    schedule = Schedule(entries, created_by=c.get("created_by").value,
                        created_at=a.timestamp)
    schedule.validate()
    return schedule
