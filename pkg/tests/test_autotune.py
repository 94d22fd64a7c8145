import math

import numpy as np
import pytest

from circus import atoms, tuning
from circus.rtio import DAC_STEP_V, Crate, CrateConfig, dac_code, dac_volts
from circus.tuning import (
    CalibrationRecord,
    DegenerateScan,
    DriftModel,
    NoPulse,
    PulseBench,
    VerificationFailed,
    Waveform,
    apply_calibration,
    calibration_scan,
    extract_pulse_time,
    fit_calibration,
    residuals,
    rms,
    scan_codes,
    scan_points,
    stabilize_cycle,
    verify_calibration,
)

PIN = atoms.make_timestamp(1_700_000_000, 0)


# -- pulse-time extraction -----------------------------------------------------

def test_step_through_midlevel_sample_is_exact():
    # the 50% level falls exactly on a sample, so interpolation must land on it
    samples = [0.0] * 50 + [0.5, 1.0] + [1.0] * 48
    wf = Waveform(0.0, 1e-9, tuple(samples))
    assert extract_pulse_time(wf) == pytest.approx(50.0, abs=1e-12)


def test_gaussian_crossing_matches_analytic_point():
    dt = 0.1e-9
    center, sigma = 60e-9, 5e-9
    t = np.arange(2000) * dt
    wf = Waveform(0.0, dt, tuple(np.exp(-0.5 * ((t - center) / sigma) ** 2)))
    analytic = (center - sigma * math.sqrt(2 * math.log(2))) * 1e9
    assert abs(extract_pulse_time(wf) - analytic) <= dt * 1e9


def test_flat_waveform_is_no_pulse():
    with pytest.raises(NoPulse):
        extract_pulse_time(Waveform(0.0, 1e-9, tuple([0.0] * 100)))
    with pytest.raises(NoPulse):
        extract_pulse_time(Waveform(0.0, 1e-9, ()))


def test_noise_only_waveform_is_no_pulse():
    rng = np.random.default_rng(5)
    wf = Waveform(0.0, 1e-9, tuple(rng.normal(0, 0.02, size=1000).tolist()))
    with pytest.raises(NoPulse):
        extract_pulse_time(wf)


def test_waveform_payload_round_trip():
    wf = Waveform(0.0, 1e-9, (0.1, 0.2, 0.3))
    back = Waveform.from_payload(wf.to_payload())
    assert back == wf
    assert list(wf.to_payload().values[:2]) == [0.0, 1e-9]


def test_extraction_scatter_is_sub_nanosecond():
    crate = Crate(CrateConfig.default(seed=2))
    bench = PulseBench(crate)
    ts = [extract_pulse_time(bench.fire_and_capture(0.0, 0.0)) for _ in range(100)]
    assert 0.01 < float(np.std(ts)) < 0.5  # a few hundred ps


# -- drift model ------------------------------------------------------------------

def test_drift_trace_deterministic_under_seed():
    model = DriftModel(0.2, 0.02, 2.0, seed=9)
    assert model.trace(50) == DriftModel(0.2, 0.02, 2.0, seed=9).trace(50)
    assert model.trace(50) != DriftModel(0.2, 0.02, 2.0, seed=10).trace(50)


def test_drift_parameters_validated():
    with pytest.raises(tuning.TuningError):
        DriftModel(-0.1, 0.0, 0.0, seed=1)
    with pytest.raises(tuning.TuningError):
        DriftModel(0.1, 1.5, 0.0, seed=1)


# -- stabilization -------------------------------------------------------------------

def make_bench(seed, noiseless=False):
    crate = Crate(CrateConfig.default(seed=seed))
    return PulseBench(crate, capture_noise_rms=0.0 if noiseless else 0.02)


def test_zero_drift_gives_zero_residual():
    bench = make_bench(1, noiseless=True)
    drift = DriftModel(0.0, 0.0, 0.0, seed=1)
    timings = stabilize_cycle(bench, bench.nominal_crossing_ns(), drift, 20)
    assert float(np.max(np.abs(residuals(timings)))) < 1e-6


def test_correction_equals_target_minus_last_test_measurement():
    bench = make_bench(3)
    drift = DriftModel(0.2, 0.02, 2.0, seed=3)
    target = bench.nominal_crossing_ns()
    timings = stabilize_cycle(bench, target, drift, 30)
    tests = [t for t in timings if t.kind == "test"]
    desired = [t for t in timings if t.kind == "desired"]
    for te, de in zip(tests, desired):
        assert de.correction_ns == target - te.measured_ns


def test_residual_equals_within_cycle_drift_change():
    # offline oracle: with a noiseless capture the desired-pulse residual is
    # exactly the drift accumulated between the test and desired firings
    bench = make_bench(4, noiseless=True)
    drift = DriftModel(0.2, 0.02, 2.0, seed=4)
    timings = stabilize_cycle(bench, bench.nominal_crossing_ns(), drift, 40)
    trace = drift.trace(40)
    desired = [t for t in timings if t.kind == "desired"]
    for (d_test, d_desired), rec in zip(trace, desired):
        assert rec.measured_ns - rec.target_ns == pytest.approx(
            d_desired - d_test, abs=2e-3)


def test_seeded_drift_keeps_desired_tight_while_test_wanders():
    bench = make_bench(2)
    drift = DriftModel(0.2, 0.02, 2.0, seed=2)
    timings = stabilize_cycle(bench, bench.nominal_crossing_ns(), drift, 100)
    assert rms(residuals(timings, "desired")) <= 0.5
    assert rms(residuals(timings, "test")) > 2.0


def test_target_change_tracks_from_next_cycle():
    bench = make_bench(6, noiseless=True)
    drift = DriftModel(0.0, 0.0, 0.0, seed=6)
    base = bench.nominal_crossing_ns()
    targets = [base] * 5 + [base + 7.0] * 5
    timings = stabilize_cycle(bench, targets, drift, 10)
    desired = [t for t in timings if t.kind == "desired"]
    for rec, tgt in zip(desired, targets):
        assert rec.target_ns == tgt
        assert abs(rec.measured_ns - tgt) < 1e-6


def test_no_pulse_propagates():
    bench = make_bench(7)
    bench.fault_next_capture = True
    with pytest.raises(NoPulse):
        stabilize_cycle(bench, bench.nominal_crossing_ns(), DriftModel(0, 0, 0, seed=7), 1)


# -- calibration scan -------------------------------------------------------------------

def nominal_crate(seed=11, **kw):
    return Crate(CrateConfig.default(seed=seed, **kw))


def test_scan_point_count_is_exactly_201():
    assert len(scan_codes()) == 65535 // 327 + 1 == 201
    crate = nominal_crate()
    scan = calibration_scan(crate, "hv0", timestamp=PIN)
    pts = scan_points(scan)
    assert len(pts) == 201
    assert all(len(r) == 5 for _, _, r in pts)


def test_scan_first_point_is_minus_ten_volts_amplified():
    gains = [20.0] * 8
    offsets = [0.02] * 8
    crate = nominal_crate(gains=gains, offsets=offsets)
    scan = calibration_scan(crate, "hv0", timestamp=PIN)
    code, set_volts, readings = scan_points(scan)[0]
    assert code == 0
    assert set_volts == -10.0
    for r in readings:
        assert abs(r - (20.0 * -10.0 + 0.02)) < 0.01


def test_scan_rerun_is_byte_identical():
    cfg = CrateConfig.default(seed=13, noise_rms_v=0.001)
    one = atoms.encode_atom(calibration_scan(Crate(cfg), "hv2", timestamp=PIN))
    two = atoms.encode_atom(calibration_scan(Crate(cfg), "hv2", timestamp=PIN))
    assert one == two


# -- fit --------------------------------------------------------------------------------

def ols_oracle(x, y):
    # independent closed-form least squares
    x = np.asarray(x)
    y = np.asarray(y)
    sxx = np.sum((x - x.mean()) ** 2)
    sxy = np.sum((x - x.mean()) * (y - y.mean()))
    slope = sxy / sxx
    return float(slope), float(y.mean() - slope * x.mean())


def test_fit_recovers_synthetic_slope_offset():
    crate = nominal_crate(seed=17, gains=[20.3] * 8, offsets=[0.15] * 8, noise_rms_v=0.001)
    scan = calibration_scan(crate, "hv0", timestamp=PIN)
    rec = fit_calibration(scan)
    assert abs(rec.slope - 20.3) < 0.001
    assert abs(rec.offset_v - 0.15) < 0.001


def test_fit_matches_independent_ols_oracle():
    crate = nominal_crate(seed=19, gains=[20.2] * 8, offsets=[-0.03] * 8)
    scan = calibration_scan(crate, "hv1", timestamp=PIN)
    pts = scan_points(scan)
    slope, offset = ols_oracle([p[1] for p in pts], [np.mean(p[2]) for p in pts])
    rec = fit_calibration(scan)
    assert rec.slope == pytest.approx(slope, abs=1e-9)
    assert rec.offset_v == pytest.approx(offset, abs=1e-9)


def test_noiseless_nominal_fit_is_exact():
    crate = nominal_crate(seed=23, noise_rms_v=0.0)
    rec = fit_calibration(calibration_scan(crate, "hv0", timestamp=PIN))
    assert rec.slope == pytest.approx(20.0, abs=1e-9)
    assert rec.offset_v == pytest.approx(0.0, abs=1e-9)
    assert rec.residual_rms_v < 1e-12


def test_single_point_scan_degenerate():
    crate = nominal_crate()
    scan = calibration_scan(crate, "hv0", step=66000, timestamp=PIN)
    assert len(scan_points(scan)) == 1
    with pytest.raises(DegenerateScan):
        fit_calibration(scan)


def test_calibration_record_round_trips_and_validates():
    rec = CalibrationRecord("hv0", 20.25, 0.01, 0.0004, PIN)
    back = CalibrationRecord.from_atom(
        atoms.decode_atom(atoms.encode_atom(rec.to_atom())))
    assert back == rec
    with pytest.raises(tuning.TuningError):
        CalibrationRecord("hv0", 30.0, 0.0, 0.0, PIN).validate()


# -- apply -------------------------------------------------------------------------------

def test_apply_nominal_20v_is_one_volt_code():
    rec = CalibrationRecord("hv0", 20.0, 0.0, 0.0, PIN)
    code, clamped = apply_calibration(rec, 20.0)
    assert (code, clamped) == (dac_code(1.0), False)


def test_apply_inverse_arithmetic():
    rec = CalibrationRecord("hv0", 20.3, 0.15, 0.0, PIN)
    code, clamped = apply_calibration(rec, 101.65)
    assert (code, clamped) == (dac_code(5.0), False)


def test_apply_clamps_beyond_range():
    rec = CalibrationRecord("hv0", 19.0, 0.0, 0.0, PIN)
    code, clamped = apply_calibration(rec, 200.0)
    assert clamped is True
    assert code == 65535


# -- verify -------------------------------------------------------------------------------

def test_calibrated_noisy_channel_passes_verification():
    crate = nominal_crate(seed=29, gains=[20.35] * 8, offsets=[0.04] * 8, noise_rms_v=0.001)
    rec = fit_calibration(calibration_scan(crate, "hv0", timestamp=PIN))
    report = verify_calibration(crate, "hv0", rec)
    assert report.passed
    assert report.max_abs_diff_v <= 0.006
    assert report.extremes_within_v <= 0.1


def test_uncalibrated_gain_error_fails_at_high_volts():
    # 1.5% of 190 V is 2.85 V, far beyond the 6 mV tolerance
    crate = nominal_crate(seed=31, gains=[20.0 * 1.015] * 8, noise_rms_v=0.001)
    nominal = CalibrationRecord("hv0", 20.0, 0.0, 0.0, PIN)
    with pytest.raises(VerificationFailed) as err:
        verify_calibration(crate, "hv0", nominal)
    report = err.value.report
    assert report.max_abs_diff_v > 1.0
    worst_desired = max(report.points, key=lambda p: abs(p[1] - p[0]))[0]
    assert abs(worst_desired) > 150.0


def test_noiseless_nominal_verification_within_half_lsb():
    crate = nominal_crate(seed=37, noise_rms_v=0.0)
    rec = fit_calibration(calibration_scan(crate, "hv0", timestamp=PIN))
    report = verify_calibration(crate, "hv0", rec)
    half_lsb_out = 20.0 * DAC_STEP_V / 2
    assert report.max_abs_diff_v <= half_lsb_out + 1e-9


def test_calibration_idempotence():
    # a second fit taken in the calibrated frame is unity slope, zero offset
    crate = nominal_crate(seed=41, gains=[20.28] * 8, offsets=[-0.02] * 8, noise_rms_v=0.001)
    rec = fit_calibration(calibration_scan(crate, "hv0", timestamp=PIN))
    desired = np.linspace(-190, 190, 120)
    measured = []
    for d in desired:
        code, _ = apply_calibration(rec, float(d))
        crate.set_dac_now(0, 0, code)
        measured.append(np.mean([crate.hv_output("hv0") for _ in range(5)]))
    slope, offset = ols_oracle(desired, measured)
    assert abs(slope - 1.0) < 0.001
    assert abs(offset) < 0.001
