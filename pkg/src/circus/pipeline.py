"""Staged analysis: raw files -> bronze -> silver -> gold -> datasets.

Bronze is a lossless byte capture of every source file, silver parses known
detector formats into a detector/acquisition/leaf structure, gold appends
per-leaf observables while preserving silver verbatim, and datasets are
per-run columnar views of selected observables. Stage outputs cache per run
and invalidate by content hash of the inputs.

The two feedback endpoints consumed by orchestration live here as well:
``last_observable`` and ``propose_parameters``.
"""

from __future__ import annotations

import hashlib
import io
import json
import pickle
import zipfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import atoms
from .daq import MANIFEST_NAME, STAGE_DIR_NAME, parse_atom_filename
from .tuning import NoPulse, Waveform, extract_pulse_time

OBSERVABLE_KINDS = ("pulse_time_ns", "image_sum", "image_mean", "image_std")


class PipelineError(Exception):
    pass


class MissingRun(PipelineError):
    pass


class UnknownObservable(PipelineError):
    pass


class NoData(PipelineError):
    pass


class OptimizerExhausted(PipelineError):
    pass


# -- stage records ------------------------------------------------------------

@dataclass
class BronzeEntry:
    file_id: str
    data: bytes
    detector: str | None
    acquisition: int | None
    format_tag: str
    container: str | None = None


@dataclass
class BronzeStore:
    run_id: str
    entries: dict  # file_id -> BronzeEntry
    name_map: dict  # sanitized file stem -> original atom name
    source_fingerprint: str


@dataclass
class SilverRecord:
    run_id: str
    detectors: dict  # detector -> {acquisition index -> leaf dict}
    failures: list  # [{"file": ..., "reason": ...}]


@dataclass
class GoldRecord:
    run_id: str
    silver: SilverRecord
    observables: dict  # detector -> {acquisition -> {kind -> value | None}}
    notes: list


@dataclass
class Dataset:
    columns: list
    rows: list

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(",".join(self.columns) + "\n")
        for row in self.rows:
            out.write(",".join("" if v is None else str(v) for v in row) + "\n")
        return out.getvalue()


def fingerprint(obj) -> str:
    """Canonical content hash over nested dicts/lists/arrays/scalars."""
    h = hashlib.sha256()

    def feed(x):
        if isinstance(x, dict):
            h.update(b"{")
            for k in sorted(x):
                h.update(str(k).encode())
                feed(x[k])
            h.update(b"}")
        elif isinstance(x, (list, tuple)):
            h.update(b"[")
            for v in x:
                feed(v)
            h.update(b"]")
        elif isinstance(x, np.ndarray):
            h.update(b"nd")
            h.update(str(x.shape).encode())
            h.update(np.ascontiguousarray(x).tobytes())
        elif isinstance(x, bytes):
            h.update(x)
        elif isinstance(x, (BronzeStore, SilverRecord, GoldRecord, BronzeEntry)):
            feed(vars(x))
        else:
            h.update(repr(x).encode())

    feed(obj)
    return h.hexdigest()


# -- raw -> bronze -------------------------------------------------------------

def _source_fingerprint(files: list[Path]) -> str:
    h = hashlib.sha256()
    for p in sorted(files):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def raw_to_bronze(run_dir: Path) -> BronzeStore:
    """Capture every file of a run byte-for-byte; zip archives contribute one
    entry per member with the container recorded. No parsing happens here."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise MissingRun(str(run_dir))
    files = [p for p in sorted(run_dir.iterdir())
             if p.is_file()]
    name_map = {}
    manifest_path = run_dir / MANIFEST_NAME
    if manifest_path.exists():
        try:
            manifest = json.loads(manifest_path.read_text())
            name_map = {e["file_stem"]: e["name"] for e in manifest.get("atoms", [])}
        except (json.JSONDecodeError, KeyError, TypeError):
            name_map = {}
    entries: dict[str, BronzeEntry] = {}
    for p in files:
        data = p.read_bytes()
        if p.suffix == ".zip":
            with zipfile.ZipFile(io.BytesIO(data)) as zf:
                for member in zf.namelist():
                    entries[f"{p.name}!{member}"] = BronzeEntry(
                        file_id=f"{p.name}!{member}",
                        data=zf.read(member),
                        detector=None,
                        acquisition=None,
                        format_tag=Path(member).suffix.lstrip(".") or "bin",
                        container=p.name,
                    )
            continue
        detector = acquisition = None
        tag = p.suffix.lstrip(".") or "bin"
        if p.suffix == ".json" and p.name != MANIFEST_NAME:
            try:
                stem, seq = parse_atom_filename(p)
            except Exception:
                stem, seq = None, None
            if stem is not None:
                original = name_map.get(stem, stem.replace(".", "/"))
                detector = original.split("/")[0]
                acquisition = seq
                tag = "atom-json"
        elif p.name == MANIFEST_NAME:
            tag = "manifest"
        entries[p.name] = BronzeEntry(p.name, data, detector, acquisition, tag)
    return BronzeStore(
        run_id=run_dir.name,
        entries=entries,
        name_map=name_map,
        source_fingerprint=_source_fingerprint(files),
    )


# -- bronze -> silver -----------------------------------------------------------

def _parse_atom_entry(entry: BronzeEntry, name_map: dict):
    a = atoms.decode_atom(entry.data.decode("utf-8"))
    suffix = a.name.rsplit("/", 1)[-1]
    if "waveform" in suffix:
        if not isinstance(a.data, atoms.ScalarArray) or len(a.data.values) < 2:
            raise PipelineError("too short")
        wf = Waveform.from_payload(a.data)
        return {
            "kind": "waveform",
            "t0_s": wf.t0_s,
            "dt_s": wf.dt_s,
            "samples": np.asarray(wf.samples, dtype=float),
            "source": entry.file_id,
        }
    if "image" in suffix:
        c = a.data
        rows, cols = c.get("rows").value, c.get("cols").value
        pixels = np.asarray(c.get("pixels").values, dtype=float)
        if pixels.size != rows * cols:
            raise PipelineError("pixel count does not match declared shape")
        return {
            "kind": "image",
            "rows": rows,
            "cols": cols,
            "gain": c.get("gain").value,
            "pixels": pixels.reshape(rows, cols),
            "source": entry.file_id,
        }
    if suffix == "config":
        return {"kind": "config", "fields": atoms.payload_to_python(a.data),
                "source": entry.file_id}
    return {"kind": "fields", "fields": atoms.payload_to_python(a.data),
            "source": entry.file_id}


def bronze_to_silver(store: BronzeStore) -> SilverRecord:
    """Parse known formats into detector -> acquisition -> leaf; anything the
    parsers cannot place lands in the failure ledger, never aborts."""
    detectors: dict = {}
    configs: dict = {}
    failures: list = []
    for file_id in sorted(store.entries):
        entry = store.entries[file_id]
        if entry.format_tag == "manifest":
            continue
        if entry.format_tag != "atom-json":
            failures.append({"file": file_id, "reason": f"unknown format {entry.format_tag!r}"})
            continue
        try:
            leaf = _parse_atom_entry(entry, store.name_map)
        except (atoms.AtomError, PipelineError, UnicodeDecodeError, KeyError) as e:
            failures.append({"file": file_id, "reason": str(e) or type(e).__name__})
            continue
        det = entry.detector or "unknown"
        if leaf["kind"] == "config":
            configs.setdefault(det, {})[entry.acquisition] = leaf["fields"]
            continue
        detectors.setdefault(det, {})[entry.acquisition] = leaf
    # attach the newest config at or before each acquisition
    for det, acqs in detectors.items():
        det_configs = sorted(configs.get(det, {}).items())
        for acq, leaf in acqs.items():
            applicable = [cfg for seq, cfg in det_configs if seq <= acq]
            leaf["config"] = applicable[-1] if applicable else None
    return SilverRecord(run_id=store.run_id, detectors=detectors, failures=failures)


def failures_atom(record: SilverRecord) -> atoms.DataAtom:
    """The parse-failure ledger itself, as an atom, so it surfaces on the console."""
    items = [
        (f"f{i:03d}", atoms.cluster(file=atoms.text(f["file"]), reason=atoms.text(f["reason"])))
        for i, f in enumerate(record.failures)
    ]
    return atoms.atom("pipeline/parse_failures", atoms.cluster_items(items))


# -- silver -> gold ----------------------------------------------------------------

def image_observables(leaf: dict, border_margin: int) -> dict:
    """Normalize by gain, subtract the border-median background (margin 0
    disables subtraction), then sum/mean/std over all pixels."""
    norm = leaf["pixels"] / leaf["gain"]
    if border_margin > 0:
        m = border_margin
        mask = np.zeros_like(norm, dtype=bool)
        mask[:m, :] = True
        mask[-m:, :] = True
        mask[:, :m] = True
        mask[:, -m:] = True
        background = float(np.median(norm[mask]))
    else:
        background = 0.0
    corrected = norm - background
    return {
        "image_sum": float(np.sum(corrected)),
        "image_mean": float(np.mean(corrected)),
        "image_std": float(np.std(corrected)),
    }


def silver_to_gold(silver: SilverRecord, border_margin: int = 8) -> GoldRecord:
    observables: dict = {}
    notes: list = []
    for det, acqs in silver.detectors.items():
        for acq, leaf in acqs.items():
            obs: dict = {}
            if leaf["kind"] == "waveform":
                wf = Waveform(leaf["t0_s"], leaf["dt_s"], tuple(leaf["samples"].tolist()))
                try:
                    obs["pulse_time_ns"] = extract_pulse_time(wf)
                except NoPulse as e:
                    obs["pulse_time_ns"] = None
                    notes.append({"detector": det, "acquisition": acq, "note": str(e)})
            elif leaf["kind"] == "image":
                obs.update(image_observables(leaf, border_margin))
            if obs:
                observables.setdefault(det, {})[acq] = obs
    return GoldRecord(run_id=silver.run_id, silver=silver, observables=observables,
                      notes=notes)


# -- the pipeline with stage caches --------------------------------------------------

class Pipeline:
    def __init__(self, root: Path | str, border_margin: int = 8):
        self.root = Path(root)
        self.runs_dir = self.root / "runs"
        self.border_margin = border_margin
        self.computed = Counter()  # stage recomputation counters, for tests

    # stage accessors (cached) ------------------------------------------

    def run_dir(self, run_id: str) -> Path:
        p = self.runs_dir / run_id
        if not p.is_dir():
            raise MissingRun(run_id)
        return p

    def _stage_dir(self, run_id: str) -> Path:
        d = self.run_dir(run_id) / STAGE_DIR_NAME
        d.mkdir(exist_ok=True)
        return d

    def _source_files(self, run_id: str) -> list[Path]:
        return [p for p in sorted(self.run_dir(run_id).iterdir()) if p.is_file()]

    def bronze(self, run_id: str, use_cache: bool = True) -> BronzeStore:
        stage = self._stage_dir(run_id) / "bronze.pkl"
        current = _source_fingerprint(self._source_files(run_id))
        if use_cache and stage.exists():
            store = pickle.loads(stage.read_bytes())
            if store.source_fingerprint == current:
                return store
        self.computed["bronze"] += 1
        store = raw_to_bronze(self.run_dir(run_id))
        stage.write_bytes(pickle.dumps(store))
        return store

    def silver(self, run_id: str, use_cache: bool = True) -> SilverRecord:
        stage = self._stage_dir(run_id) / "silver.pkl"
        bronze = self.bronze(run_id, use_cache=use_cache)
        if use_cache and stage.exists():
            cached = pickle.loads(stage.read_bytes())
            if cached["source_fingerprint"] == bronze.source_fingerprint:
                return cached["record"]
        self.computed["silver"] += 1
        record = bronze_to_silver(bronze)
        stage.write_bytes(pickle.dumps(
            {"source_fingerprint": bronze.source_fingerprint, "record": record}))
        return record

    def gold(self, run_id: str, use_cache: bool = True) -> GoldRecord:
        stage = self._stage_dir(run_id) / "gold.pkl"
        bronze = self.bronze(run_id, use_cache=use_cache)
        if use_cache and stage.exists():
            cached = pickle.loads(stage.read_bytes())
            if cached["source_fingerprint"] == bronze.source_fingerprint:
                return cached["record"]
        self.computed["gold"] += 1
        record = silver_to_gold(self.silver(run_id, use_cache=use_cache), self.border_margin)
        stage.write_bytes(pickle.dumps(
            {"source_fingerprint": bronze.source_fingerprint, "record": record}))
        return record

    promote = gold

    # uncached loads, for the stage-timing property -----------------------

    def load_from(self, run_id: str, stage: str) -> GoldRecord:
        if stage == "gold":
            return self.gold(run_id)
        if stage == "bronze":
            store = self.bronze(run_id)
            return silver_to_gold(bronze_to_silver(store), self.border_margin)
        if stage == "raw":
            store = raw_to_bronze(self.run_dir(run_id))
            return silver_to_gold(bronze_to_silver(store), self.border_margin)
        raise PipelineError(f"unknown stage {stage!r}")

    # datasets --------------------------------------------------------------

    def _observable_cell(self, gold: GoldRecord, name: str):
        if "/" not in name:
            raise UnknownObservable(name)
        det, kind = name.rsplit("/", 1)
        if kind not in OBSERVABLE_KINDS:
            raise UnknownObservable(name)
        acqs = gold.observables.get(det)
        if not acqs:
            return None
        last_acq = max(acqs)
        return acqs[last_acq].get(kind)

    def build_dataset(self, observable_names: list[str], run_ids: list[str]) -> Dataset:
        for name in observable_names:
            if "/" not in name or name.rsplit("/", 1)[1] not in OBSERVABLE_KINDS:
                raise UnknownObservable(name)
        rows = []
        for run_id in sorted(run_ids):
            gold = self.gold(run_id)
            rows.append([run_id] + [self._observable_cell(gold, n) for n in observable_names])
        return Dataset(columns=["run_id"] + list(observable_names), rows=rows)

    def export_dataset(self, dataset: Dataset, path: Path) -> Path:
        path = Path(path)
        path.write_text(dataset.to_csv())
        manifest = atoms.atom("dataset/manifest", atoms.cluster(
            columns=atoms.ScalarArray("Str", tuple(dataset.columns)),
            row_count=atoms.i32(len(dataset.rows)),
            csv_file=atoms.text(path.name),
        ))
        manifest_path = path.with_suffix(".manifest.json")
        manifest_path.write_text(atoms.encode_atom(manifest))
        return manifest_path

    # feedback endpoints ------------------------------------------------------

    def list_run_ids(self) -> list[str]:
        if not self.runs_dir.is_dir():
            return []
        return sorted(p.name for p in self.runs_dir.iterdir() if p.is_dir())

    def last_observable(self, name: str) -> atoms.DataAtom:
        """Most recent value of an observable across runs, by run order."""
        for run_id in reversed(self.list_run_ids()):
            try:
                value = self._observable_cell(self.gold(run_id), name)
            except MissingRun:
                continue
            if value is not None:
                return atoms.atom("observable/" + name, atoms.cluster(
                    run_id=atoms.text(run_id), value=atoms.f64(float(value))))
        raise NoData(name)


# -- parameter proposal (pluggable optimizers) -----------------------------------------

@dataclass(frozen=True)
class FeedbackSpec:
    observable: str
    objective: str  # "maximize" | "minimize" | "target"
    target_value: float | None = None
    optimizer: str = "auto"
    settings: dict = field(default_factory=dict)
    budget: int = 20

    def loss(self, value: float) -> float:
        if self.objective == "maximize":
            return -value
        if self.objective == "minimize":
            return value
        if self.objective == "target":
            return abs(value - float(self.target_value))
        raise PipelineError(f"unknown objective {self.objective!r}")


GOLDEN_RATIO = (np.sqrt(5.0) - 1.0) / 2.0


def _golden_section_points(lo: float, hi: float):
    """Generator protocol: yields the next query point, receives its loss.
    Starts at the center of the bounds, then refines by golden sections."""
    g = GOLDEN_RATIO
    yield (lo + hi) / 2.0  # burn-in point; its loss does not steer the bracket
    a, b = lo, hi
    x1 = b - g * (b - a)
    x2 = a + g * (b - a)
    f1 = yield x1
    f2 = yield x2
    while True:
        if f1 < f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - g * (b - a)
            f1 = yield x1
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + g * (b - a)
            f2 = yield x2


def _coordinate_descent_points(grids: dict):
    """Cycle through the parameters, scanning each one's grid with the others
    held at the incumbent best; repeat until stationary."""
    params = list(grids)
    current = {k: grids[k][len(grids[k]) // 2] for k in params}
    evaluated: dict[tuple, float] = {}

    def key(p):
        return tuple(p[k] for k in params)

    f = yield dict(current)
    evaluated[key(current)] = f
    while True:
        progressed = False
        for k in params:
            for v in grids[k]:
                cand = dict(current, **{k: v})
                if key(cand) not in evaluated:
                    f = yield cand
                    evaluated[key(cand)] = f
            best_v = min(grids[k], key=lambda v: evaluated[key(dict(current, **{k: v}))])
            if best_v != current[k]:
                current = dict(current, **{k: best_v})
                progressed = True
        if not progressed:
            while True:
                yield dict(current)  # stationary: keep restating the optimum


def propose_parameters(spec: FeedbackSpec, history: list) -> dict:
    """Next parameter set given (params, observable value) history; the
    proposal sequence replays deterministically from the history's losses.
    Raises OptimizerExhausted once the experiment budget is spent."""
    if spec.budget < 1 or len(history) >= spec.budget:
        raise OptimizerExhausted(f"budget {spec.budget} spent")
    kind = spec.optimizer
    if kind == "auto":
        kind = "golden_section" if len(spec.settings.get("bounds", {})) == 1 else \
            "coordinate_descent"
    if kind == "golden_section":
        (param, (lo, hi)), = spec.settings["bounds"].items()
        gen = _golden_section_points(float(lo), float(hi))
        wrap = lambda x: {param: x}
    elif kind == "coordinate_descent":
        grids = {k: list(v) for k, v in spec.settings["grid"].items()}
        gen = _coordinate_descent_points(grids)
        wrap = dict
    else:
        raise PipelineError(f"unknown optimizer {kind!r}")
    proposal = next(gen)
    for _, value in history:
        proposal = gen.send(spec.loss(value))
    return wrap(proposal)
