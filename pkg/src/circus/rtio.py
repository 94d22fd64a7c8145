"""Deterministic simulator of one control-electronics crate.

Machine-unit clock (1 mu = 1 ns), FIFO output timeline with underflow
protection, TTL I/O with edge gating, staged 16-bit DAC channels behind
20x high-voltage amplifiers with per-channel gain/offset/noise and relay
isolation, DMA sequence playback, and external trigger injection.

Everything is reproducible: a fixed config (including its noise seed), the
submitted events and the injected triggers fully determine the trace.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from . import atoms

MU_PER_SECOND = 1_000_000_000  # 1 mu = 1 ns
DEFAULT_SLACK_MU = 1_000  # 1 us minimum scheduling lead

DAC_BITS = 16
DAC_MAX_CODE = 2**DAC_BITS - 1
DAC_RANGE_V = 10.0
DAC_STEP_V = 2 * DAC_RANGE_V / DAC_MAX_CODE  # 20/65535

TRIGGER_NAMES = ("ad_injection", "elena_injection", "bunch_pre_arrival", "bunch_arrival")


class RtioError(Exception):
    pass


class Underflow(RtioError):
    """Event scheduled earlier than now + slack."""


class DirectionError(RtioError):
    pass


class UnknownChannel(RtioError):
    pass


class UnknownTrigger(RtioError):
    pass


class ConfigError(RtioError):
    pass


# -- time helpers -------------------------------------------------------------

def mu_from_seconds(s: float) -> int:
    return int(round(s * MU_PER_SECOND))


def seconds_from_mu(mu: int) -> float:
    return mu / MU_PER_SECOND


def us(v: float) -> int:
    return int(round(v * 1_000))


def ms(v: float) -> int:
    return int(round(v * 1_000_000))


def s(v: float) -> int:
    return int(round(v * MU_PER_SECOND))


# -- DAC quantization ----------------------------------------------------------

def dac_quantize(volts: float) -> tuple[int, bool]:
    """Offset-binary code for a requested DAC voltage, plus a clamp flag."""
    code = int(round((volts + DAC_RANGE_V) / DAC_STEP_V))
    if code < 0:
        return 0, True
    if code > DAC_MAX_CODE:
        return DAC_MAX_CODE, True
    return code, False


def dac_code(volts: float) -> int:
    return dac_quantize(volts)[0]


def dac_volts(code: int) -> float:
    if not 0 <= code <= DAC_MAX_CODE:
        raise RtioError(f"DAC code {code} out of 16-bit range")
    return code * DAC_STEP_V - DAC_RANGE_V


# -- events -------------------------------------------------------------------

@dataclass(frozen=True)
class TtlSet:
    level: bool


@dataclass(frozen=True)
class TtlPulse:
    """Pulser device: a timed level-high pulse of settable width."""
    width_mu: int


@dataclass(frozen=True)
class DacWord:
    """Stage a code into a board-local channel register (no output change)."""
    index: int
    code: int


@dataclass(frozen=True)
class DacUpdate:
    """Latch staged codes onto the outputs selected by the bit mask."""
    mask: int


@dataclass(frozen=True)
class Relay:
    open: bool


@dataclass(frozen=True)
class SineBurst:
    """Rotating-wall synthesizer descriptor; traces record the descriptor,
    not per-sample sinusoids."""
    freq_hz: float
    amplitude_v: float
    phases_deg: tuple

    def __post_init__(self):
        if not 0 <= self.freq_hz <= 30e6:
            raise ConfigError("synthesizer frequency must be within 0-30 MHz")
        if not 0 <= self.amplitude_v <= 5.0:
            raise ConfigError("synthesizer amplitude must be <= 5 V")


Action = TtlSet | TtlPulse | DacWord | DacUpdate | Relay | SineBurst


@dataclass(frozen=True)
class TimelineEvent:
    at: int  # mu
    channel: str
    action: Action


@dataclass(frozen=True)
class TraceEntry:
    t_mu: int
    channel: str
    value: float | bool | str


# -- configuration -------------------------------------------------------------

@dataclass
class HvChannelConfig:
    dac_index: int
    gain: float = 20.0
    offset_v: float = 0.0
    noise_rms_v: float = 0.001

    def validate(self):
        if self.gain <= 0:
            raise ConfigError("amplifier gain must be positive")


@dataclass
class CatchGateConfig:
    """High-voltage catching channel: two-level output gated by one TTL."""
    ttl: str
    high_volts: float = 12_000.0


@dataclass
class CrateConfig:
    seed: int
    ttl_count: int = 16
    # one direction per batch of four channels
    ttl_directions: list = field(default_factory=lambda: ["input", "output", "output", "output"])
    fastino_count: int = 1
    hv_channels: list = field(default_factory=list)  # list[HvChannelConfig], board 0
    slack_mu: int = DEFAULT_SLACK_MU
    trigger_map: dict = field(default_factory=lambda: {
        "ad_injection": "ttl0",
        "elena_injection": "ttl1",
        "bunch_pre_arrival": "ttl2",
        "bunch_arrival": "ttl3",
    })
    cycle_gap_s: float = 30.0
    catch_gate: CatchGateConfig | None = None
    max_update_rate_hz: float | None = None

    def validate(self):
        if self.ttl_count % 4 != 0:
            raise ConfigError("TTL channels come in batches of four")
        if len(self.ttl_directions) != self.ttl_count // 4:
            raise ConfigError("one direction entry per batch of four TTLs")
        for d in self.ttl_directions:
            if d not in ("input", "output"):
                raise ConfigError(f"bad direction {d!r}")
        if len(self.hv_channels) % 8 != 0:
            raise ConfigError("HV amplifier boards hold eight channels")
        for hv in self.hv_channels:
            hv.validate()
        for name in self.trigger_map:
            if name not in TRIGGER_NAMES:
                raise ConfigError(f"unknown trigger {name!r} in map")

    @classmethod
    def default(cls, seed: int, hv_count: int = 8, gains=None, offsets=None,
                noise_rms_v: float = 0.001) -> "CrateConfig":
        hv = []
        for i in range(hv_count):
            hv.append(HvChannelConfig(
                dac_index=i,
                gain=(gains[i] if gains is not None else 20.0),
                offset_v=(offsets[i] if offsets is not None else 0.0),
                noise_rms_v=noise_rms_v,
            ))
        cfg = cls(seed=seed, hv_channels=hv)
        cfg.validate()
        return cfg

    # -- interchange-format config files --------------------------------

    def to_atom(self) -> atoms.DataAtom:
        hv = atoms.cluster_items(
            (f"hv{i:03d}", atoms.cluster(
                dac_index=atoms.i32(c.dac_index),
                gain=atoms.f64(c.gain),
                offset_v=atoms.f64(c.offset_v),
                noise_rms_v=atoms.f64(c.noise_rms_v),
            ))
            for i, c in enumerate(self.hv_channels)
        )
        trig = atoms.cluster_items(
            (k, atoms.text(v)) for k, v in self.trigger_map.items())
        return atoms.atom("crate_config", atoms.cluster(
            seed=atoms.i32(self.seed),
            ttl_count=atoms.i32(self.ttl_count),
            ttl_directions=atoms.ScalarArray("Str", tuple(self.ttl_directions)),
            fastino_count=atoms.i32(self.fastino_count),
            hv=hv,
            slack_mu=atoms.f64(float(self.slack_mu)),
            trigger_map=trig,
            cycle_gap_s=atoms.f64(self.cycle_gap_s),
        ))

    @classmethod
    def from_atom(cls, a: atoms.DataAtom) -> "CrateConfig":
        c = a.data
        if not isinstance(c, atoms.Cluster) or "seed" not in c:
            raise ConfigError("crate config requires a mandatory seed field")
        hv = []
        for _, entry in c.get("hv").fields:
            hv.append(HvChannelConfig(
                dac_index=entry.get("dac_index").value,
                gain=entry.get("gain").value,
                offset_v=entry.get("offset_v").value,
                noise_rms_v=entry.get("noise_rms_v").value,
            ))
        cfg = cls(
            seed=c.get("seed").value,
            ttl_count=c.get("ttl_count").value,
            ttl_directions=list(c.get("ttl_directions").values),
            fastino_count=c.get("fastino_count").value,
            hv_channels=hv,
            slack_mu=int(c.get("slack_mu").value),
            trigger_map={k: v.value for k, v in c.get("trigger_map").fields},
            cycle_gap_s=c.get("cycle_gap_s").value,
        )
        cfg.validate()
        return cfg


# -- trace ---------------------------------------------------------------------

@dataclass
class WaveformTrace:
    entries: list = field(default_factory=list)

    def channel(self, name: str) -> list[TraceEntry]:
        return [e for e in self.entries if e.channel == name]

    def channels(self) -> list[str]:
        return sorted({e.channel for e in self.entries})

    def to_atom(self, name: str = "trace",
                timestamp: atoms.AtomTimestamp | None = None) -> atoms.DataAtom:
        """Per-channel (time_mu, value) pairs as one cluster atom. Pass a
        fixed timestamp when comparing exports byte-for-byte."""
        groups = {}
        for e in self.entries:
            groups.setdefault(e.channel, []).append(e)
        items = []
        for ch in sorted(groups):
            entries = groups[ch]
            times = atoms.f64_array([float(e.t_mu) for e in entries])
            if all(isinstance(e.value, (bool, int, float)) for e in entries):
                values = atoms.f64_array([float(e.value) for e in entries])
            else:
                values = atoms.ScalarArray("Str", tuple(str(e.value) for e in entries))
            items.append((ch.replace("/", "."), atoms.cluster(t_mu=times, value=values)))
        return atoms.atom(name, atoms.cluster_items(items), timestamp)


# -- the crate ------------------------------------------------------------------

class Crate:
    """Owns the simulated timeline. Single-controller ownership: all mutation
    funnels through schedule/run_until/inject calls on one instance."""

    def __init__(self, config: CrateConfig):
        config.validate()
        self.config = config
        self.now_mu = 0
        self._seq = 0
        self._heap: list = []  # (at, seq, channel, action, is_input)
        self.trace = WaveformTrace()
        self._ttl_level = {f"ttl{i}": False for i in range(config.ttl_count)}
        self._input_edges = {f"ttl{i}": [] for i in range(config.ttl_count)}
        self._edge_cursor = {f"ttl{i}": 0 for i in range(config.ttl_count)}
        self._staged = [np.zeros(32, dtype=np.uint16) for _ in range(config.fastino_count)]
        self._active = [np.full(32, dac_code(0.0), dtype=np.uint16)
                        for _ in range(config.fastino_count)]
        self._relay_open = [False] * len(config.hv_channels)
        self._hv_rng = [np.random.default_rng([config.seed, 0x48, i])
                        for i in range(len(config.hv_channels))]
        self._hv_by_dac = {c.dac_index: i for i, c in enumerate(config.hv_channels)}
        self._last_update_mu: dict[int, int] = {}
        self._dma: dict[str, tuple] = {}

    # -- channel helpers -------------------------------------------------

    def ttl_direction(self, channel: str) -> str:
        idx = self._ttl_index(channel)
        return self.config.ttl_directions[idx // 4]

    def set_ttl_direction_batch(self, batch: int, direction: str) -> None:
        if direction not in ("input", "output"):
            raise ConfigError(f"bad direction {direction!r}")
        if not 0 <= batch < len(self.config.ttl_directions):
            raise UnknownChannel(f"ttl batch {batch}")
        self.config.ttl_directions[batch] = direction

    def _ttl_index(self, channel: str) -> int:
        if not channel.startswith("ttl"):
            raise UnknownChannel(channel)
        try:
            idx = int(channel[3:])
        except ValueError:
            raise UnknownChannel(channel) from None
        if not 0 <= idx < self.config.ttl_count:
            raise UnknownChannel(channel)
        return idx

    def _fastino_index(self, channel: str) -> int:
        if not channel.startswith("fastino"):
            raise UnknownChannel(channel)
        try:
            idx = int(channel[7:])
        except ValueError:
            raise UnknownChannel(channel) from None
        if not 0 <= idx < self.config.fastino_count:
            raise UnknownChannel(channel)
        return idx

    def _hv_index(self, channel: str) -> int:
        if not channel.startswith("hv"):
            raise UnknownChannel(channel)
        try:
            idx = int(channel[2:])
        except ValueError:
            raise UnknownChannel(channel) from None
        if not 0 <= idx < len(self.config.hv_channels):
            raise UnknownChannel(channel)
        return idx

    def hv_channel_names(self) -> list[str]:
        return [f"hv{i}" for i in range(len(self.config.hv_channels))]

    # -- scheduling --------------------------------------------------------

    def schedule(self, at_mu: int, channel: str, action: Action) -> None:
        if at_mu < self.now_mu + self.config.slack_mu:
            raise Underflow(
                f"event at {at_mu} mu is inside now+slack ({self.now_mu}+{self.config.slack_mu})")
        self._validate_event(channel, action)
        self._push(at_mu, channel, action, is_input=False)

    def _validate_event(self, channel: str, action: Action) -> None:
        if isinstance(action, (TtlSet, TtlPulse)):
            if self.ttl_direction(channel) != "output":
                raise DirectionError(f"{channel} is not an output")
        elif isinstance(action, (DacWord, DacUpdate)):
            self._fastino_index(channel)
            if isinstance(action, DacWord) and not 0 <= action.index < 32:
                raise RtioError(f"DAC board-local index {action.index} out of 0-31")
            if isinstance(action, DacWord) and not 0 <= action.code <= DAC_MAX_CODE:
                raise RtioError(f"DAC code {action.code} out of 16-bit range")
        elif isinstance(action, Relay):
            self._hv_index(channel)
        elif isinstance(action, SineBurst):
            pass  # sector electrodes are free-form channel names
        else:
            raise RtioError(f"unknown action {action!r}")

    def _push(self, at_mu: int, channel: str, action, is_input: bool) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (at_mu, self._seq, channel, action, is_input))

    # -- input injection ----------------------------------------------------

    def inject_edge(self, channel: str, t_mu: int) -> None:
        idx = self._ttl_index(channel)
        if self.config.ttl_directions[idx // 4] != "input":
            raise DirectionError(f"{channel} is not an input")
        if t_mu < self.now_mu:
            raise RtioError("cannot inject an edge into the past")
        self._input_edges[channel].append(t_mu)
        self._input_edges[channel].sort()
        self._push(t_mu, channel, "rising_edge", is_input=True)

    def inject_trigger(self, name: str, t_mu: int) -> None:
        if name not in TRIGGER_NAMES:
            raise UnknownTrigger(name)
        channel = self.config.trigger_map.get(name)
        if channel is None:
            raise UnknownTrigger(f"{name} has no mapped channel")
        self.inject_edge(channel, t_mu)

    def inject_beam_cycle(self, t0_mu: int) -> dict:
        """Inject the decelerator trigger cascade starting at t0: injection
        trigger, then pre-arrival 20 us before the bunch, then arrival."""
        gap = mu_from_seconds(self.config.cycle_gap_s)
        times = {
            "elena_injection": t0_mu,
            "bunch_pre_arrival": t0_mu + gap - us(20),
            "bunch_arrival": t0_mu + gap,
        }
        for name, t in times.items():
            self.inject_trigger(name, t)
        return times

    # -- gating ----------------------------------------------------------------

    def gate_rising(self, channel: str, window_mu: int) -> int | None:
        """First unconsumed rising edge within the window, advancing the clock
        to the edge (or to the window end when none arrives)."""
        idx = self._ttl_index(channel)
        if self.config.ttl_directions[idx // 4] != "input":
            raise DirectionError(f"{channel} is not an input")
        deadline = self.now_mu + window_mu
        edges = self._input_edges[channel]
        cursor = self._edge_cursor[channel]
        while cursor < len(edges) and edges[cursor] < self.now_mu:
            cursor += 1
        if cursor < len(edges) and edges[cursor] <= deadline:
            t = edges[cursor]
            self._edge_cursor[channel] = cursor + 1
            self.run_until(t)
            return t
        self._edge_cursor[channel] = cursor
        self.run_until(deadline)
        return None

    # -- DMA ---------------------------------------------------------------------

    def dma_record(self, name: str, events: list[tuple[int, str, Action]]) -> str:
        for rel, channel, action in events:
            if rel < 0:
                raise RtioError("DMA sequences use relative times >= 0")
            self._validate_event(channel, action)
        self._dma[name] = tuple(events)
        return name

    def dma_playback(self, handle: str, t0_mu: int) -> None:
        if handle not in self._dma:
            raise RtioError(f"unknown DMA sequence {handle!r}")
        if t0_mu < self.now_mu + self.config.slack_mu:
            raise Underflow(f"DMA playback at {t0_mu} mu violates slack")
        for rel, channel, action in self._dma[handle]:
            self._push(t0_mu + rel, channel, action, is_input=False)

    # -- execution ------------------------------------------------------------------

    def run_until(self, t_mu: int) -> list[TraceEntry]:
        if t_mu < self.now_mu:
            raise RtioError("cannot run the clock backwards")
        delta: list[TraceEntry] = []
        while self._heap and self._heap[0][0] <= t_mu:
            at, _seq, channel, action, is_input = heapq.heappop(self._heap)
            self.now_mu = at
            if is_input:
                delta.append(self._record(at, channel, True))
                continue
            delta.extend(self._execute(at, channel, action))
        self.now_mu = t_mu
        return delta

    def _record(self, t_mu: int, channel: str, value) -> TraceEntry:
        entry = TraceEntry(t_mu, channel, value)
        self.trace.entries.append(entry)
        return entry

    def _execute(self, at: int, channel: str, action: Action) -> list[TraceEntry]:
        out: list[TraceEntry] = []
        if isinstance(action, TtlSet):
            if self._ttl_level[channel] != action.level:
                self._ttl_level[channel] = action.level
                out.append(self._record(at, channel, action.level))
                out.extend(self._catch_gate_effect(at, channel, action.level))
        elif isinstance(action, TtlPulse):
            if not self._ttl_level[channel]:
                self._ttl_level[channel] = True
                out.append(self._record(at, channel, True))
                out.extend(self._catch_gate_effect(at, channel, True))
            self._push(at + action.width_mu, channel, TtlSet(False), is_input=False)
        elif isinstance(action, DacWord):
            board = self._fastino_index(channel)
            self._staged[board][action.index] = action.code
        elif isinstance(action, DacUpdate):
            board = self._fastino_index(channel)
            self._check_update_rate(board, at)
            for index in range(32):
                if not action.mask & (1 << index):
                    continue
                if self._active[board][index] == self._staged[board][index]:
                    continue
                self._active[board][index] = self._staged[board][index]
                out.extend(self._record_dac_change(at, board, index))
        elif isinstance(action, Relay):
            hv = self._hv_index(channel)
            if self._relay_open[hv] != action.open:
                self._relay_open[hv] = action.open
                out.append(self._record(at, channel, self.hv_level(channel)))
        elif isinstance(action, SineBurst):
            desc = (f"sine f={action.freq_hz:g}Hz a={action.amplitude_v:g}V "
                    f"ph={','.join(f'{p:g}' for p in action.phases_deg)}")
            out.append(self._record(at, channel, desc))
        return out

    def _check_update_rate(self, board: int, at: int) -> None:
        rate = self.config.max_update_rate_hz
        if rate:
            last = self._last_update_mu.get(board)
            min_gap = int(MU_PER_SECOND / rate)
            if last is not None and at - last < min_gap:
                raise RtioError(
                    f"fastino{board} update at {at} mu exceeds {rate:g} Hz update rate")
        self._last_update_mu[board] = at

    def _record_dac_change(self, at: int, board: int, index: int) -> list[TraceEntry]:
        volts = dac_volts(int(self._active[board][index]))
        if board == 0 and index in self._hv_by_dac:
            hv = self._hv_by_dac[index]
            name = f"hv{hv}"
            return [self._record(at, name, self.hv_level(name))]
        return [self._record(at, f"fastino{board}/ch{index}", volts)]

    def _catch_gate_effect(self, at: int, channel: str, level: bool) -> list[TraceEntry]:
        gate = self.config.catch_gate
        if gate is None or gate.ttl != channel:
            return []
        return [self._record(at, "catch0", gate.high_volts if level else 0.0)]

    # -- amplifier outputs ---------------------------------------------------------

    def hv_level(self, channel: str) -> float:
        """Noiseless amplifier output at the current clock."""
        hv = self._hv_index(channel)
        if self._relay_open[hv]:
            return 0.0
        cfg = self.config.hv_channels[hv]
        code = int(self._active[0][cfg.dac_index])
        return cfg.gain * dac_volts(code) + cfg.offset_v

    def hv_output(self, channel: str) -> float:
        """One multimeter-style reading: true level plus one noise draw."""
        hv = self._hv_index(channel)
        cfg = self.config.hv_channels[hv]
        noise = float(self._hv_rng[hv].normal(0.0, cfg.noise_rms_v)) if cfg.noise_rms_v else 0.0
        return self.hv_level(channel) + noise

    # -- direct (non-realtime) moves, used by calibration and init ------------------

    def set_dac_now(self, board: int, index: int, code: int) -> None:
        """Stage and latch one DAC channel at the earliest legal time."""
        at = self.now_mu + self.config.slack_mu
        channel = f"fastino{board}"
        self.schedule(at, channel, DacWord(index, code))
        self.schedule(at, channel, DacUpdate(1 << index))
        self.run_until(at)

    def zero_all_dacs(self) -> None:
        for board in range(self.config.fastino_count):
            at = self.now_mu + self.config.slack_mu
            ch = f"fastino{board}"
            for index in range(32):
                self.schedule(at, ch, DacWord(index, dac_code(0.0)))
            self.schedule(at, ch, DacUpdate(0xFFFFFFFF))
            self.run_until(at)

    def close_all_relays(self) -> None:
        at = self.now_mu + self.config.slack_mu
        for i in range(len(self.config.hv_channels)):
            self.schedule(at, f"hv{i}", Relay(open=False))
        self.run_until(at)
