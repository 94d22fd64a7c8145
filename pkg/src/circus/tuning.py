"""Closed-loop procedures over the simulated crate.

Two loops live here: laser-pulse timing stabilization against a drifting
pulse-generation delay, and per-channel amplifier calibration (scan, linear
fit, application, verification).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import atoms, rtio
from .rtio import Crate, dac_quantize, dac_volts


class TuningError(Exception):
    pass


class NoPulse(TuningError):
    """Waveform peak does not clear the noise floor."""


class DegenerateScan(TuningError):
    pass


class VerificationFailed(TuningError):
    def __init__(self, report):
        super().__init__(f"max |diff| {report.max_abs_diff_v * 1e3:.2f} mV exceeds "
                         f"{report.tolerance_v * 1e3:.0f} mV")
        self.report = report


# -- waveforms -----------------------------------------------------------------

@dataclass(frozen=True)
class Waveform:
    """Sampled detector readout: start time, sample increment, samples.

    The on-disk convention packs these as one float array whose first two
    entries are t0 and dt (both seconds) followed by the samples.
    """

    t0_s: float
    dt_s: float
    samples: tuple

    def to_payload(self) -> atoms.ScalarArray:
        return atoms.f64_array([self.t0_s, self.dt_s, *self.samples])

    @classmethod
    def from_payload(cls, p: atoms.ScalarArray) -> "Waveform":
        values = p.values
        if len(values) < 2:
            raise TuningError("waveform arrays carry t0, dt and then samples")
        return cls(values[0], values[1], tuple(values[2:]))


def extract_pulse_time(wf: Waveform, threshold_factor: float = 5.0,
                       baseline_fraction: float = 0.1) -> float:
    """Arrival time in ns: the 50%-of-peak rising-edge crossing, linearly
    interpolated between samples.

    Baseline and noise floor are estimated from the leading
    ``baseline_fraction`` of the record; a peak below ``threshold_factor``
    times the noise RMS raises NoPulse.
    """
    samples = np.asarray(wf.samples, dtype=float)
    if samples.size == 0:
        raise NoPulse("empty waveform")
    head = samples[: max(4, int(samples.size * baseline_fraction))]
    baseline = float(np.median(head))
    noise_rms = float(np.std(head))
    peak_idx = int(np.argmax(samples))
    peak = float(samples[peak_idx])
    if peak - baseline <= max(threshold_factor * noise_rms, 1e-12):
        raise NoPulse(
            f"peak {peak - baseline:g} below {threshold_factor:g} x noise {noise_rms:g}")
    level = baseline + 0.5 * (peak - baseline)
    i = peak_idx
    while i > 0 and samples[i - 1] >= level:
        i -= 1
    if i == 0:
        # record starts above the 50% level: crossing not observed
        raise NoPulse("rising edge precedes the record")
    lo, hi = samples[i - 1], samples[i]
    frac = (level - lo) / (hi - lo)
    return (wf.t0_s + wf.dt_s * (i - 1 + frac)) * 1e9


# -- timing stabilization ---------------------------------------------------------

@dataclass(frozen=True)
class DriftModel:
    """Pulse-generation delay model: random walk per cycle with occasional
    signed jumps, plus a smaller within-cycle increment between the test and
    the desired firing. Deterministic under a fixed seed."""

    walk_sigma_ns: float
    jump_prob: float
    jump_ns: float
    seed: int
    within_cycle_fraction: float = 0.25

    def __post_init__(self):
        if self.walk_sigma_ns < 0 or self.jump_ns < 0 or not 0 <= self.jump_prob <= 1:
            raise TuningError("drift parameters must be non-negative")

    def trace(self, cycles: int) -> list[tuple[float, float]]:
        """(drift at test firing, drift at desired firing) per cycle, ns."""
        rng = np.random.default_rng([self.seed, 0xD21F7])
        value = 0.0
        out = []
        for _ in range(cycles):
            value += float(rng.normal(0.0, self.walk_sigma_ns))
            if float(rng.random()) < self.jump_prob:
                value += self.jump_ns * (1.0 if rng.random() < 0.5 else -1.0)
            within = float(rng.normal(0.0, self.walk_sigma_ns * self.within_cycle_fraction))
            out.append((value, value + within))
            value += within
        return out


@dataclass(frozen=True)
class PulseTiming:
    cycle: int
    kind: str  # "test" or "desired"
    measured_ns: float
    target_ns: float
    correction_ns: float


class PulseBench:
    """Pockels-triggered laser pulse with photodiode capture, on the crate
    timeline. The capture window is anchored to the nominal cycle trigger so
    corrections show up as shifted arrival times."""

    def __init__(self, crate: Crate, pockels: str = "ttl4",
                 window_ns: float = 200.0, dt_ns: float = 0.1,
                 pulse_center_ns: float = 60.0, pulse_sigma_ns: float = 5.0,
                 amplitude: float = 1.0, capture_noise_rms: float = 0.02,
                 cycle_period_mu: int = rtio.ms(1)):
        self.crate = crate
        self.pockels = pockels
        self.window_ns = window_ns
        self.dt_ns = dt_ns
        self.pulse_center_ns = pulse_center_ns
        self.pulse_sigma_ns = pulse_sigma_ns
        self.amplitude = amplitude
        self.capture_noise_rms = capture_noise_rms
        self.cycle_period_mu = cycle_period_mu
        self._rng = np.random.default_rng([crate.config.seed, 0x9D])
        self.fault_next_capture = False

    def nominal_crossing_ns(self) -> float:
        return self.pulse_center_ns - self.pulse_sigma_ns * math.sqrt(2 * math.log(2))

    def fire_and_capture(self, correction_ns: float, drift_ns: float) -> Waveform:
        """Trigger the Pockels cell shifted by the correction; the physical
        pulse also rides the (unknown to the caller) drift."""
        t_fire = self.crate.now_mu + self.crate.config.slack_mu + rtio.us(1) + int(
            round(correction_ns))
        self.crate.schedule(t_fire, self.pockels, rtio.TtlPulse(rtio.us(1)))
        self.crate.run_until(t_fire + self.cycle_period_mu // 2)
        n = int(round(self.window_ns / self.dt_ns))
        t = np.arange(n) * self.dt_ns
        center = self.pulse_center_ns + correction_ns + drift_ns
        if self.fault_next_capture:
            self.fault_next_capture = False
            signal = np.zeros(n)
        else:
            signal = self.amplitude * np.exp(-0.5 * ((t - center) / self.pulse_sigma_ns) ** 2)
        if self.capture_noise_rms:
            signal = signal + self._rng.normal(0.0, self.capture_noise_rms, size=n)
        return Waveform(0.0, self.dt_ns * 1e-9, tuple(signal.tolist()))


def stabilize_cycle(bench: PulseBench, target_ns, drift: DriftModel,
                    cycles: int) -> list[PulseTiming]:
    """Per cycle: fire a test pulse, measure its arrival, compute the
    correction target - measured, then fire the desired pulse with its
    trigger advanced by that correction. Returns the interleaved timings."""
    targets = list(target_ns) if isinstance(target_ns, (list, tuple)) else [target_ns] * cycles
    if len(targets) != cycles:
        raise TuningError("one target per cycle")
    timings: list[PulseTiming] = []
    for cycle, (drift_test, drift_desired) in enumerate(drift.trace(cycles)):
        target = targets[cycle]
        wf = bench.fire_and_capture(0.0, drift_test)
        measured_test = extract_pulse_time(wf)
        timings.append(PulseTiming(cycle, "test", measured_test, target, 0.0))
        correction = target - measured_test
        wf = bench.fire_and_capture(correction, drift_desired)
        measured_desired = extract_pulse_time(wf)
        timings.append(PulseTiming(cycle, "desired", measured_desired, target, correction))
    return timings


def residuals(timings: list[PulseTiming], kind: str = "desired") -> np.ndarray:
    return np.asarray([t.measured_ns - t.target_ns for t in timings if t.kind == kind])


def rms(values) -> float:
    arr = np.asarray(values, dtype=float)
    return float(np.sqrt(np.mean(arr**2))) if arr.size else 0.0


# -- amplifier calibration ---------------------------------------------------------

SCAN_STEP_CODES = 327
READINGS_PER_POINT = 5
VERIFY_TOLERANCE_V = 0.006
EXTREME_TOLERANCE_V = 0.1


@dataclass(frozen=True)
class CalibrationRecord:
    channel: str
    slope: float  # output volts per DAC volt
    offset_v: float
    residual_rms_v: float
    fitted_at: atoms.AtomTimestamp

    def validate(self) -> None:
        if not 15.0 <= self.slope <= 25.0:
            raise TuningError(f"fitted slope {self.slope:g} outside the 15-25 sanity band")
        if not math.isfinite(self.residual_rms_v):
            raise TuningError("residual RMS must be finite")

    def to_atom(self) -> atoms.DataAtom:
        return atoms.atom("calibration/" + self.channel, atoms.cluster(
            channel=atoms.text(self.channel),
            slope=atoms.f64(self.slope),
            offset_v=atoms.f64(self.offset_v),
            residual_rms_v=atoms.f64(self.residual_rms_v),
        ), self.fitted_at)

    @classmethod
    def from_atom(cls, a: atoms.DataAtom) -> "CalibrationRecord":
        c = a.data
        rec = cls(
            channel=c.get("channel").value,
            slope=c.get("slope").value,
            offset_v=c.get("offset_v").value,
            residual_rms_v=c.get("residual_rms_v").value,
            fitted_at=a.timestamp,
        )
        rec.validate()
        return rec


def scan_codes(step: int = SCAN_STEP_CODES, max_code: int = rtio.DAC_MAX_CODE) -> list[int]:
    """Scan positions 0, step, 2*step, ... (floor(max/step)+1 points), each
    clamped to the top code."""
    count = max_code // step + 1
    return [min(i * step, max_code) for i in range(count)]


def calibration_scan(crate: Crate, channel: str, readings_per_point: int = READINGS_PER_POINT,
                     step: int = SCAN_STEP_CODES,
                     timestamp: atoms.AtomTimestamp | None = None) -> atoms.DataAtom:
    """Sweep the DAC from minimum to maximum, reading the amplifier output
    ``readings_per_point`` times per step; returns the scan document."""
    hv_index = crate._hv_index(channel)
    dac_index = crate.config.hv_channels[hv_index].dac_index
    points = []
    for i, code in enumerate(scan_codes(step)):
        crate.set_dac_now(0, dac_index, code)
        readings = [crate.hv_output(channel) for _ in range(readings_per_point)]
        points.append((f"p{i:03d}", atoms.cluster(
            code=atoms.i32(code),
            set_volts=atoms.f64(dac_volts(code)),
            readings=atoms.f64_array(readings),
        )))
    return atoms.atom("calibration_scan/" + channel, atoms.cluster(
        channel=atoms.text(channel),
        points=atoms.cluster_items(points),
    ), timestamp)


def scan_points(scan: atoms.DataAtom) -> list[tuple[int, float, list[float]]]:
    out = []
    for _, p in scan.data.get("points").fields:
        out.append((p.get("code").value, p.get("set_volts").value,
                    list(p.get("readings").values)))
    return out


def fit_calibration(scan: atoms.DataAtom) -> CalibrationRecord:
    """Ordinary least squares of mean reading against set voltage."""
    pts = scan_points(scan)
    x = np.asarray([p[1] for p in pts])
    y = np.asarray([float(np.mean(p[2])) for p in pts])
    if len(set(x.tolist())) < 2:
        raise DegenerateScan("need at least two distinct set points")
    slope, offset = np.polyfit(x, y, 1)
    residual = y - (slope * x + offset)
    rec = CalibrationRecord(
        channel=scan.data.get("channel").value,
        slope=float(slope),
        offset_v=float(offset),
        residual_rms_v=float(np.sqrt(np.mean(residual**2))),
        fitted_at=atoms.timestamp_now(),
    )
    rec.validate()
    return rec


def apply_calibration(rec: CalibrationRecord, desired_v: float) -> tuple[int, bool]:
    """DAC code realizing the desired amplifier output; clamps at the DAC
    range (the flag reports it)."""
    return dac_quantize((desired_v - rec.offset_v) / rec.slope)


def verification_pattern(limit_v: float = 190.0) -> list[float]:
    """Desired output voltages for verification: fine steps at low voltage,
    coarse steps towards the limits (a different pattern from the scan)."""
    coarse_neg = np.arange(-limit_v, -20.0, 8.5)
    fine = np.arange(-20.0, 20.0, 1.7)
    coarse_pos = np.arange(20.0, limit_v + 0.1, 8.5)
    return [float(v) for v in np.concatenate([coarse_neg, fine, coarse_pos, [limit_v]])]


@dataclass
class VerificationReport:
    channel: str
    points: list  # (desired_v, measured_v)
    max_abs_diff_v: float
    tolerance_v: float
    extreme_low_v: float
    extreme_high_v: float
    extremes_within_v: float
    passed: bool


def verify_calibration(crate: Crate, channel: str, rec: CalibrationRecord,
                       readings_per_point: int = READINGS_PER_POINT,
                       tolerance_v: float = VERIFY_TOLERANCE_V) -> VerificationReport:
    """Independent sweep applying the calibration, reporting per-point
    desired-vs-measured differences. Raises VerificationFailed when any point
    within the +-190 V band misses by more than the tolerance."""
    hv_index = crate._hv_index(channel)
    dac_index = crate.config.hv_channels[hv_index].dac_index

    def measure(desired: float) -> float:
        code, _ = apply_calibration(rec, desired)
        crate.set_dac_now(0, dac_index, code)
        return float(np.mean([crate.hv_output(channel) for _ in range(readings_per_point)]))

    pts = [(v, measure(v)) for v in verification_pattern()]
    max_abs = max(abs(m - d) for d, m in pts)
    extreme_low = measure(-200.0)
    extreme_high = measure(200.0)
    extremes_within = max(abs(extreme_low + 200.0), abs(extreme_high - 200.0))
    report = VerificationReport(
        channel=channel,
        points=pts,
        max_abs_diff_v=max_abs,
        tolerance_v=tolerance_v,
        extreme_low_v=extreme_low,
        extreme_high_v=extreme_high,
        extremes_within_v=extremes_within,
        passed=max_abs <= tolerance_v,
    )
    if not report.passed:
        raise VerificationFailed(report)
    return report
