"""Command-line tools: amplifier calibration and the analysis pipeline."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import atoms, tuning
from .daq import data_root
from .pipeline import Pipeline
from .rtio import Crate, CrateConfig


def _load_crate(args) -> Crate:
    if args.config:
        cfg = CrateConfig.from_atom(atoms.decode_atom(Path(args.config).read_text()))
    else:
        cfg = CrateConfig.default(seed=args.seed)
    return Crate(cfg)


def cal_main(argv=None) -> None:
    parser = argparse.ArgumentParser(
        prog="circus-cal",
        description="Amplifier channel calibration against the simulated crate.")
    parser.add_argument("action", choices=["scan", "fit", "apply", "verify"])
    parser.add_argument("--channel", type=int, required=True)
    parser.add_argument("--config", help="crate config file (interchange format)")
    parser.add_argument("--seed", type=int, default=1,
                        help="crate seed when no config file is given")
    parser.add_argument("--dir", default=".", help="where scan/calibration files live")
    parser.add_argument("--volts", type=float, help="desired output for 'apply'")
    args = parser.parse_args(argv)

    channel = f"hv{args.channel}"
    workdir = Path(args.dir)
    workdir.mkdir(parents=True, exist_ok=True)
    scan_path = workdir / f"scan_{channel}.json"
    cal_path = workdir / f"calibration_{channel}.json"

    if args.action == "scan":
        crate = _load_crate(args)
        scan = tuning.calibration_scan(crate, channel)
        scan_path.write_text(atoms.encode_atom(scan))
        print(f"wrote {scan_path} ({len(tuning.scan_points(scan))} points)")
        return

    if args.action == "fit":
        scan = atoms.decode_atom(scan_path.read_text())
        rec = tuning.fit_calibration(scan)
        cal_path.write_text(atoms.encode_atom(rec.to_atom()))
        print(f"{channel}: slope {rec.slope:.6f} V/V, offset {rec.offset_v * 1e3:.3f} mV, "
              f"residual {rec.residual_rms_v * 1e3:.3f} mV rms -> {cal_path}")
        return

    rec = tuning.CalibrationRecord.from_atom(atoms.decode_atom(cal_path.read_text()))

    if args.action == "apply":
        if args.volts is None:
            parser.error("apply requires --volts")
        code, clamped = tuning.apply_calibration(rec, args.volts)
        note = " (clamped)" if clamped else ""
        print(f"{channel}: {args.volts} V -> DAC code {code}{note}")
        return

    crate = _load_crate(args)
    try:
        report = tuning.verify_calibration(crate, channel, rec)
    except tuning.VerificationFailed as e:
        report = e.report
        print(f"{channel}: FAIL max |diff| {report.max_abs_diff_v * 1e3:.2f} mV "
              f"(tolerance {report.tolerance_v * 1e3:.0f} mV)")
        sys.exit(1)
    print(f"{channel}: PASS max |diff| {report.max_abs_diff_v * 1e3:.2f} mV, "
          f"extremes within {report.extremes_within_v * 1e3:.1f} mV of +-200 V")


def pipe_main(argv=None) -> None:
    parser = argparse.ArgumentParser(
        prog="circus-pipe", description="Staged analysis pipeline over stored runs.")
    parser.add_argument("--root", default=None,
                        help="storage root (default: CIRCUS_DATA_ROOT or cwd)")
    sub = parser.add_subparsers(dest="action", required=True)

    promote = sub.add_parser("promote", help="run all stages for one run")
    promote.add_argument("run_id")

    dataset = sub.add_parser("dataset", help="build a dataset of observables")
    dataset.add_argument("--obs", required=True, help="comma-separated observable names")
    dataset.add_argument("--runs", required=True, nargs="+",
                         help="run ids (space separated)")
    dataset.add_argument("--out", default="dataset.csv")

    args = parser.parse_args(argv)
    pipe = Pipeline(Path(args.root) if args.root else data_root())

    if args.action == "promote":
        gold = pipe.promote(args.run_id)
        n_obs = sum(len(v) for v in gold.observables.values())
        print(f"run {args.run_id}: {n_obs} observable sets, "
              f"{len(gold.silver.failures)} parse failures")
        if gold.silver.failures:
            for f in gold.silver.failures:
                print(f"  ledger: {f['file']}: {f['reason']}")
        return

    names = [n.strip() for n in args.obs.split(",") if n.strip()]
    ds = pipe.build_dataset(names, args.runs)
    manifest_path = pipe.export_dataset(ds, Path(args.out))
    print(f"wrote {args.out} ({len(ds.rows)} rows) and {manifest_path}")


if __name__ == "__main__":
    (cal_main if os.path.basename(sys.argv[0]).startswith("circus-cal") else pipe_main)()
