"""Experiment scripts: declarative step programs over the crate and the bus.

A script is data (name, typed params, ordered steps), serializable to the
interchange format, compiled once to machine units and executed against one
crate context. Service calls happen between timed segments; the step grammar
makes it impossible to wait on the bus inside a timed block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import atoms, rtio
from .rtio import Crate, DacUpdate, DacWord, TtlPulse
from .tuning import CalibrationRecord, apply_calibration

STEP_SET_VERSION = "1"
DEFAULT_TRIGGER_WINDOW_S = 120.0

TIMED_OPS = {"set_voltage", "pulse", "sleep"}
BLOCKING_OPS = {"call_service", "require_beam", "emit_scalar", "emit_waveform"}


class ScriptError(Exception):
    pass


class ConfigMismatch(ScriptError):
    pass


class TriggerTimeout(ScriptError):
    pass


class UnknownServiceKind(ScriptError):
    pass


@dataclass(frozen=True)
class Quantity:
    value: float
    unit: str


_UNIT_MU = {"ns": 1.0, "us": 1e3, "ms": 1e6, "s": 1e9}


def to_mu(value) -> int:
    if isinstance(value, Quantity):
        factor = _UNIT_MU.get(value.unit)
        if factor is None:
            raise ScriptError(f"unknown time unit {value.unit!r}")
        return int(round(value.value * factor))
    if isinstance(value, (int, float)):
        return int(round(value))  # already machine units
    raise ScriptError(f"cannot convert {value!r} to machine units")


@dataclass
class ExperimentScript:
    name: str
    params: dict = field(default_factory=dict)
    body: list = field(default_factory=list)  # list of step dicts
    step_set: str = STEP_SET_VERSION


@dataclass
class RunOutcome:
    status: str  # success | retryable | fatal
    reason: str | None = None
    produced_atoms: list = field(default_factory=list)
    log: list = field(default_factory=list)

    @property
    def retryable(self) -> bool:
        return self.status == "retryable"


class ScriptContext:
    """One initialized crate plus the slow-control reachables."""

    def __init__(self, crate: Crate, node=None, service_map: dict | None = None,
                 calibration: dict[str, CalibrationRecord] | None = None,
                 laser_channels: tuple[str, str] = ("ttl8", "ttl9"),
                 daq_run=None, daq_store=None):
        self.crate = crate
        self.node = node
        self.service_map = dict(service_map or {})
        self.calibration = dict(calibration or {})
        self.laser_channels = laser_channels
        self.daq_run = daq_run
        self.daq_store = daq_store
        self.log: list = []
        self.params: dict = {}

    def log_line(self, message: str) -> None:
        self.log.append((atoms.timestamp_now().display, message))

    async def call_service(self, kind: str, command: str, payload: atoms.DataAtom,
                           timeout: float = 0.1) -> atoms.DataAtom:
        """Synchronous request to a microservice by class; 100 ms budget."""
        if self.node is None:
            raise UnknownServiceKind(kind)
        address = self.service_map.get(kind)
        if address is None:
            from .services import UnknownService, resolve_kind
            try:
                address = resolve_kind(self.node, kind)
            except UnknownService:
                raise UnknownServiceKind(kind) from None
        return await self.node.call(address, command, payload, timeout=timeout)


# -- validation and compilation -------------------------------------------------------

def _walk_steps(body):
    for step in body:
        yield step
        if step.get("op") in ("repeat", "timed_block"):
            yield from _walk_steps(step.get("body", ()))


def validate_script(script: ExperimentScript, crate: Crate, node=None) -> None:
    if script.step_set != STEP_SET_VERSION:
        raise ScriptError(f"unsupported step set {script.step_set!r}")
    for step in _walk_steps(script.body):
        op = step.get("op")
        if op in ("set_voltages_at_trigger", "wait_trigger"):
            trig = step["trigger"]
            if trig not in crate.config.trigger_map:
                raise ConfigMismatch(f"trigger {trig!r} is not mapped")
        if op == "set_voltages_at_trigger":
            for channel, _ in step["pairs"]:
                crate._hv_index(channel)  # raises UnknownChannel
        if op in ("pulse",):
            crate._ttl_index(step["channel"])
        if op == "set_voltage":
            crate._hv_index(step["channel"])
        if op == "timed_block":
            for inner in _walk_steps(step.get("body", ())):
                if inner.get("op") in BLOCKING_OPS:
                    raise ScriptError(
                        f"step {inner['op']!r} waits on the bus inside a timed block")
    if node is not None:
        from .services import UnknownService, resolve_kind
        for step in _walk_steps(script.body):
            if step.get("op") == "call_service":
                try:
                    resolve_kind(node, step["kind"])
                except UnknownService:
                    raise ConfigMismatch(
                        f"service kind {step['kind']!r} is not registered") from None


def compile_script(script: ExperimentScript, crate: Crate) -> list:
    """Resolve literal quantities to machine units once; '$param' references
    stay symbolic until run time."""
    validate_script(script, crate)

    def compile_value(v):
        if isinstance(v, Quantity):
            return to_mu(v)
        return v

    def compile_step(step):
        out = {}
        for k, v in step.items():
            if k == "body":
                out[k] = [compile_step(s) for s in v]
            elif k in ("delay", "window", "width", "duration", "realign_every", "period"):
                out[k] = v if isinstance(v, str) else compile_value(v)
            else:
                out[k] = v
        return out

    return [compile_step(s) for s in script.body]


def _resolve(value, params):
    if isinstance(value, str) and value.startswith("$"):
        name = value[1:]
        if name not in params:
            raise ScriptError(f"parameter {name!r} not bound")
        return params[name]
    return value


# -- build/init -------------------------------------------------------------------------

def build_and_init(script: ExperimentScript, crate: Crate, node=None,
                   calibration: dict | None = None, **ctx_kwargs) -> ScriptContext:
    """Standardized setup: directions applied, relays closed, DACs zeroed,
    calibration table attached. Idempotent: a second init adds no trace."""
    if any(not is_input for *_rest, is_input in crate._heap):
        raise ConfigMismatch("crate timeline has pending output events")
    validate_script(script, crate, node)
    crate.close_all_relays()
    crate.zero_all_dacs()
    ctx = ScriptContext(crate, node=node, calibration=calibration, **ctx_kwargs)
    ctx.params = dict(script.params)
    ctx.log_line(f"initialized for {script.name!r}")
    return ctx


# -- library operations -------------------------------------------------------------------

def voltage_code(ctx: ScriptContext, channel: str, volts_out: float) -> int:
    """DAC code for a requested amplifier output, calibrated when possible."""
    rec = ctx.calibration.get(channel)
    if rec is not None:
        code, clamped = apply_calibration(rec, volts_out)
        if clamped:
            ctx.log_line(f"warning: {channel} request {volts_out} V clamped")
        return code
    ctx.log_line(f"warning: {channel} uncalibrated, using nominal gain 20")
    code, clamped = rtio.dac_quantize(volts_out / 20.0)
    if clamped:
        ctx.log_line(f"warning: {channel} request {volts_out} V clamped")
    return code


def set_voltages_at_trigger(ctx: ScriptContext, trigger: str, delay, pairs,
                            window=None) -> int | None:
    """Wait for the trigger's rising edge, then step every listed channel to
    its requested output voltage simultaneously at edge + delay."""
    crate = ctx.crate
    channel = crate.config.trigger_map.get(trigger)
    if channel is None:
        raise ConfigMismatch(f"trigger {trigger!r} is not mapped")
    delay_mu = to_mu(delay)
    window_mu = to_mu(window) if window is not None else rtio.s(DEFAULT_TRIGGER_WINDOW_S)
    t_trig = crate.gate_rising(channel, window_mu)
    if t_trig is None:
        raise TriggerTimeout(f"no {trigger} edge within {window_mu} mu")
    if not pairs:
        ctx.log_line(f"trigger {trigger} at {t_trig} mu; no outputs requested")
        return t_trig
    events = []
    mask = 0
    for hv_channel, volts in pairs:
        hv = crate.config.hv_channels[crate._hv_index(hv_channel)]
        code = voltage_code(ctx, hv_channel, volts)
        events.append((0, "fastino0", DacWord(hv.dac_index, code)))
        mask |= 1 << hv.dac_index
    events.append((0, "fastino0", DacUpdate(mask)))
    handle = crate.dma_record(f"svt_{trigger}_{t_trig}", events)
    crate.dma_playback(handle, t_trig + delay_mu)
    crate.run_until(t_trig + delay_mu)
    ctx.log_line(f"stepped {len(pairs)} channels at trigger+{delay_mu} mu")
    return t_trig


def laser_sync_continuous(ctx: ScriptContext, f_a: float = 10.0, f_b: float = 4.0,
                          realign_every=Quantity(30, "s"), duration=Quantity(90, "s"),
                          pulse_width=Quantity(1, "us")) -> list:
    """Two pulse trains; at every realignment boundary both lasers fire at the
    same machine unit, wiping any accumulated quantization drift."""
    crate = ctx.crate
    ch_a, ch_b = ctx.laser_channels
    realign_mu = to_mu(realign_every)
    end_mu = to_mu(duration)
    width_mu = to_mu(pulse_width)
    t0 = crate.now_mu + crate.config.slack_mu
    periods = {ch_a: int(round(rtio.MU_PER_SECOND / f_a)),
               ch_b: int(round(rtio.MU_PER_SECOND / f_b))}
    boundary = t0
    while boundary <= t0 + end_mu:
        segment_end = min(boundary + realign_mu, t0 + end_mu + 1)
        for channel, period in periods.items():
            t = boundary
            while t < segment_end:
                crate.schedule(t, channel, TtlPulse(width_mu))
                t += period
        boundary += realign_mu
    delta = crate.run_until(t0 + end_mu + width_mu)
    ctx.log_line(f"continuous sync {f_a:g}/{f_b:g} Hz over {end_mu} mu")
    return delta


def laser_sync_on_demand(ctx: ScriptContext, command_times,
                         pump=Quantity(200, "ms"), pulse_width=Quantity(1, "us")) -> list:
    """Each command pumps both lasers, then triggers them simultaneously; a
    command landing during an active sequence queues behind it."""
    crate = ctx.crate
    ch_a, ch_b = ctx.laser_channels
    pump_mu = to_mu(pump)
    width_mu = to_mu(pulse_width)
    fire_times = []
    next_free = crate.now_mu + crate.config.slack_mu
    for t_cmd in sorted(to_mu(t) for t in command_times):
        start = max(t_cmd, next_free)
        fire = start + pump_mu
        crate.schedule(fire, ch_a, TtlPulse(width_mu))
        crate.schedule(fire, ch_b, TtlPulse(width_mu))
        fire_times.append(fire)
        next_free = fire + width_mu
    if fire_times:
        crate.run_until(fire_times[-1] + width_mu)
    ctx.log_line(f"fired {len(fire_times)} on-demand coincident pairs")
    return fire_times


def synth_waveform(center_ns: float, sigma_ns: float = 5.0, n: int = 2000,
                   dt_ns: float = 0.1, amplitude: float = 1.0) -> atoms.ScalarArray:
    t = np.arange(n) * dt_ns
    samples = amplitude * np.exp(-0.5 * ((t - center_ns) / sigma_ns) ** 2)
    return atoms.f64_array([0.0, dt_ns * 1e-9, *samples.tolist()])


# -- execution --------------------------------------------------------------------------

async def _write_daq_atom(ctx: ScriptContext, a: atoms.DataAtom) -> None:
    if ctx.daq_store is not None and ctx.daq_run is not None:
        ctx.daq_store.write_atom(ctx.daq_run, a)
        return
    if ctx.node is not None:
        wrapped = atoms.DataAtom(f"{ctx.daq_run}/{a.name}" if isinstance(ctx.daq_run, str)
                                 else a.name, a.timestamp, a.data)
        await ctx.call_service("DAQ Manager", "daq/write", wrapped)
        return
    raise ScriptError("no DAQ attached to this context")


async def run_script(script: ExperimentScript, ctx: ScriptContext,
                     param_overrides: dict | None = None) -> RunOutcome:
    """Execute the step program; managed failures come back as retryable
    outcomes with machine-readable reasons, never exceptions."""
    params = dict(script.params)
    params.update(param_overrides or {})
    ctx.params = params
    outcome = RunOutcome("success", produced_atoms=[], log=ctx.log)
    try:
        steps = compile_script(script, ctx.crate)
        await _run_steps(steps, ctx, params, outcome)
    except TriggerTimeout as e:
        return RunOutcome("retryable", "trigger_timeout", outcome.produced_atoms, ctx.log)
    except BeamUnavailable:
        return RunOutcome("retryable", "beam_empty", outcome.produced_atoms, ctx.log)
    except DaqUnreachable:
        return RunOutcome("retryable", "daq_unreachable", outcome.produced_atoms, ctx.log)
    except (ScriptError, rtio.RtioError) as e:
        ctx.log_line(f"fatal: {e}")
        return RunOutcome("fatal", f"{type(e).__name__}: {e}", outcome.produced_atoms, ctx.log)
    return outcome


class BeamUnavailable(Exception):
    pass


class DaqUnreachable(Exception):
    pass


async def _run_steps(steps, ctx: ScriptContext, params, outcome: RunOutcome) -> None:
    from .actors import ActorError, Timeout as BusTimeout

    crate = ctx.crate
    for step in steps:
        op = step["op"]
        if op == "set_voltages_at_trigger":
            pairs = [(ch, float(_resolve(v, params))) for ch, v in step["pairs"]]
            set_voltages_at_trigger(ctx, step["trigger"], _resolve(step["delay"], params),
                                    pairs, step.get("window"))
        elif op == "wait_trigger":
            channel = crate.config.trigger_map[step["trigger"]]
            window = step.get("window")
            window_mu = to_mu(window) if window is not None else rtio.s(DEFAULT_TRIGGER_WINDOW_S)
            if crate.gate_rising(channel, window_mu) is None:
                raise TriggerTimeout(step["trigger"])
        elif op == "set_voltage":
            volts = float(_resolve(step["volts"], params))
            channel = step["channel"]
            hv = crate.config.hv_channels[crate._hv_index(channel)]
            code = voltage_code(ctx, channel, volts)
            crate.set_dac_now(0, hv.dac_index, code)
        elif op == "pulse":
            at = crate.now_mu + crate.config.slack_mu + to_mu(_resolve(step.get("delay", 0), params))
            crate.schedule(at, step["channel"], TtlPulse(to_mu(_resolve(step["width"], params))))
            crate.run_until(at)
        elif op == "sleep":
            crate.run_until(crate.now_mu + to_mu(_resolve(step["duration"], params)))
        elif op == "repeat":
            count = int(_resolve(step["count"], params))
            for _ in range(count):
                await _run_steps(step["body"], ctx, params, outcome)
        elif op == "timed_block":
            await _run_steps(step["body"], ctx, params, outcome)
        elif op == "require_beam":
            try:
                reply = await ctx.call_service(
                    "Beam Monitor", "beam/available", atoms.atom("q", atoms.boolean(True)))
            except (UnknownServiceKind, ActorError) as e:
                raise BeamUnavailable() from e
            if not reply.data.value:
                raise BeamUnavailable()
        elif op == "call_service":
            payload = step.get("payload")
            a = payload if isinstance(payload, atoms.DataAtom) else atoms.atom(
                "cmd", atoms.python_to_payload(_resolve(payload, params) if payload else True))
            try:
                await ctx.call_service(step["kind"], step["command"], a)
            except UnknownServiceKind:
                raise
            except (ActorError, BusTimeout) as e:
                if step["kind"] == "DAQ Manager":
                    raise DaqUnreachable() from e
                raise ScriptError(f"service {step['kind']!r} failed: {e}") from e
        elif op == "emit_scalar":
            value = float(_resolve(step["value"], params))
            a = atoms.atom(step["name"], atoms.f64(value))
            await _write_daq_atom(ctx, a)
            outcome.produced_atoms.append(step["name"])
        elif op == "emit_waveform":
            center = float(_resolve(step["center_ns"], params))
            a = atoms.atom(step["name"], synth_waveform(center))
            await _write_daq_atom(ctx, a)
            outcome.produced_atoms.append(step["name"])
        else:
            raise ScriptError(f"unknown step op {op!r}")


# -- interchange serialization ---------------------------------------------------------------

def _value_to_payload(v):
    if isinstance(v, Quantity):
        return atoms.cluster(value=atoms.f64(v.value), unit=atoms.text(v.unit))
    return atoms.python_to_payload(v)


def _payload_to_value(p):
    if isinstance(p, atoms.Cluster) and "unit" in p and "value" in p:
        return Quantity(p.get("value").value, p.get("unit").value)
    return atoms.payload_to_python(p)


def _step_to_cluster(step: dict) -> atoms.Cluster:
    items = []
    for k, v in sorted(step.items()):
        if k == "body":
            items.append((k, atoms.cluster_items(
                (f"s{i:03d}", _step_to_cluster(s)) for i, s in enumerate(v))))
        elif k == "pairs":
            items.append((k, atoms.cluster_items(
                (f"c{i:03d}", atoms.cluster(channel=atoms.text(ch),
                                            volts=_value_to_payload(val)))
                for i, (ch, val) in enumerate(v))))
        else:
            items.append((k, _value_to_payload(v)))
    return atoms.cluster_items(items)


def _cluster_to_step(c: atoms.Cluster) -> dict:
    step = {}
    for k, v in c.fields:
        if k == "body":
            step[k] = [_cluster_to_step(s) for _, s in v.fields]
        elif k == "pairs":
            step[k] = [(p.get("channel").value, _payload_to_value(p.get("volts")))
                       for _, p in v.fields]
        else:
            step[k] = _payload_to_value(v)
    return step


def script_to_atom(script: ExperimentScript) -> atoms.DataAtom:
    return atoms.atom("script/" + script.name, atoms.cluster(
        name=atoms.text(script.name),
        step_set=atoms.text(script.step_set),
        params=atoms.cluster_items(
            (k, _value_to_payload(v)) for k, v in script.params.items()),
        steps=atoms.cluster_items(
            (f"s{i:03d}", _step_to_cluster(s)) for i, s in enumerate(script.body)),
    ))


def script_from_atom(a: atoms.DataAtom) -> ExperimentScript:
    c = a.data
    if c.get("step_set").value != STEP_SET_VERSION:
        raise ScriptError(f"unsupported step set {c.get('step_set').value!r}")
    return ExperimentScript(
        name=c.get("name").value,
        params={k: _payload_to_value(v) for k, v in c.get("params").fields},
        body=[_cluster_to_step(s) for _, s in c.get("steps").fields],
        step_set=c.get("step_set").value,
    )


# -- stock scripts ------------------------------------------------------------------------

def ramp_script(volts: float = 20.0, delay=Quantity(10, "us"),
                channels=("hv1", "hv2", "hv3"), trigger="bunch_arrival") -> ExperimentScript:
    """The canonical triggered synchronous step: wait for the trigger, then
    raise three amplifier channels together."""
    return ExperimentScript(
        name="hv_ramp_at_trigger",
        params={"amplitude": volts},
        body=[{
            "op": "set_voltages_at_trigger",
            "trigger": trigger,
            "delay": delay,
            "pairs": [(ch, "$amplitude") for ch in channels],
        }],
    )


def scan_point_script(detector: str = "photodiode") -> ExperimentScript:
    """One scan point: check the beam, emit a waveform whose pulse center is
    set by the scan parameters."""
    return ExperimentScript(
        name="scan_point",
        params={"pulse_center": 60.0, "attempt_cost": 1.0},
        body=[
            {"op": "require_beam"},
            {"op": "emit_waveform", "name": f"{detector}/waveform",
             "center_ns": "$pulse_center"},
        ],
    )
