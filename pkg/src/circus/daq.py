"""Run-scoped ingestion of data atoms to durable storage.

One directory per run under ``<root>/runs/``, one interchange file per atom,
a ``manifest.json`` finalized at run stop. Files become visible only after an
atomic rename, so a reader never sees a partial document.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from . import atoms
from .atoms import DataAtom, payload_type_signature

MANIFEST_NAME = "manifest.json"
STAGE_DIR_NAME = "_stages"


class DaqError(Exception):
    pass


class DuplicateRun(DaqError):
    pass


class UnknownRun(DaqError):
    pass


class RunClosed(DaqError):
    pass


class TypeChanged(DaqError):
    """Same atom name re-emitted with a different payload shape."""


class RunState(str, Enum):
    OPEN = "open"
    CLOSING = "closing"
    CLOSED = "closed"


_RUN_ID_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")


def sanitize_name(name: str) -> str:
    return name.replace("/", ".")


def data_root() -> Path:
    return Path(os.environ.get("CIRCUS_DATA_ROOT", "."))


@dataclass
class RunHandle:
    run_id: str
    started_at: atoms.AtomTimestamp
    state: RunState = RunState.OPEN
    atom_count: int = 0
    # per-name bookkeeping: sanitized -> (original name, type signature, last seq)
    _names: dict = field(default_factory=dict, repr=False)

    @property
    def names(self) -> list[str]:
        return sorted(orig for orig, _, _ in self._names.values())


@dataclass
class RunSummary:
    run_id: str
    atom_count: int
    names: list[str]
    duration_seconds: float


class DaqStore:
    """Single sink for all acquired data. Thread-safe; the bus-facing service
    wrapper serializes ingestion through one actor on top of this."""

    def __init__(self, root: Path | str | None = None):
        self.root = Path(root) if root is not None else data_root()
        self.runs_dir = self.root / "runs"
        self.runs_dir.mkdir(parents=True, exist_ok=True)
        self._open_runs: dict[str, RunHandle] = {}
        self._lock = threading.Lock()
        self._started_monotonic: dict[str, float] = {}

    # -- run lifecycle --------------------------------------------------

    def next_run_id(self) -> str:
        existing = [p.name for p in self.runs_dir.iterdir() if p.is_dir()]
        numeric = [int(n) for n in existing if n.isdigit()]
        return f"{(max(numeric) + 1) if numeric else 1:06d}"

    def run_start(self, run_id: str | None = None) -> RunHandle:
        with self._lock:
            rid = run_id or self.next_run_id()
            if not _RUN_ID_RE.match(rid):
                raise DaqError(f"run id {rid!r} is not filesystem-safe")
            if rid in self._open_runs or (self.runs_dir / rid).exists():
                raise DuplicateRun(rid)
            run_dir = self.runs_dir / rid
            run_dir.mkdir(parents=True)
            handle = RunHandle(run_id=rid, started_at=atoms.timestamp_now())
            self._write_manifest(handle, stopped_at=None)
            self._open_runs[rid] = handle
            self._started_monotonic[rid] = time.monotonic()
            return handle

    def run_stop(self, run: RunHandle) -> RunSummary:
        with self._lock:
            if run.state is not RunState.OPEN:
                raise RunClosed(run.run_id)
            run.state = RunState.CLOSING
            stopped = atoms.timestamp_now()
            self._write_manifest(run, stopped_at=stopped, fsync=True)
            run.state = RunState.CLOSED
            self._open_runs.pop(run.run_id, None)
            duration = time.monotonic() - self._started_monotonic.pop(run.run_id, time.monotonic())
            return RunSummary(run.run_id, run.atom_count, run.names, duration)

    # -- ingestion --------------------------------------------------------

    def write_atom(self, run: RunHandle, a: DataAtom) -> Path:
        with self._lock:
            if run.state is not RunState.OPEN:
                raise RunClosed(run.run_id)
            a.validate()
            sanitized = sanitize_name(a.name)
            signature = payload_type_signature(a.data)
            known = run._names.get(sanitized)
            if known is None:
                run._names[sanitized] = (a.name, signature, 0)
                known = run._names[sanitized]
            orig, known_sig, last_seq = known
            if orig != a.name:
                raise DaqError(
                    f"atom names {orig!r} and {a.name!r} collide as file {sanitized!r}")
            if known_sig != signature:
                raise TypeChanged(
                    f"{a.name}: payload shape {signature} differs from established {known_sig}")
            seq = last_seq + 1
            run._names[sanitized] = (orig, known_sig, seq)
            run.atom_count += 1
            path = self.runs_dir / run.run_id / f"{sanitized}__{seq:06d}.json"
            _atomic_write_text(path, atoms.encode_atom(a))
            return path

    # -- reading ----------------------------------------------------------

    def run_path(self, run_id: str) -> Path:
        p = self.runs_dir / run_id
        if not p.is_dir():
            raise UnknownRun(run_id)
        return p

    def list_runs(self) -> list[str]:
        return sorted(p.name for p in self.runs_dir.iterdir() if p.is_dir())

    def read_manifest(self, run_id: str) -> dict:
        return json.loads((self.run_path(run_id) / MANIFEST_NAME).read_text())

    def atom_files(self, run_id: str) -> list[Path]:
        return sorted(
            p for p in self.run_path(run_id).iterdir()
            if p.suffix == ".json" and p.name != MANIFEST_NAME
        )

    # -- internals --------------------------------------------------------

    def _write_manifest(self, run: RunHandle, stopped_at, fsync: bool = False) -> None:
        manifest = {
            "run_id": run.run_id,
            "started_at": _ts_obj(run.started_at),
            "stopped_at": _ts_obj(stopped_at) if stopped_at else None,
            "atoms": [
                {"name": orig, "file_stem": sanitized, "count": seq, "type_tag": sig}
                for sanitized, (orig, sig, seq) in sorted(run._names.items())
            ],
        }
        path = self.runs_dir / run.run_id / MANIFEST_NAME
        _atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True), fsync=fsync)


def _ts_obj(ts: atoms.AtomTimestamp) -> dict:
    return {"str": ts.display, "tv_sec": ts.epoch_seconds, "tv_nsec": ts.epoch_nanos}


def _atomic_write_text(path: Path, content: str, fsync: bool = False) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(content)
        if fsync:
            f.flush()
            os.fsync(f.fileno())
    os.replace(tmp, path)


def parse_atom_filename(path: Path) -> tuple[str, int]:
    """(sanitized name, sequence number) from a stored atom file name."""
    stem = path.stem
    if "__" not in stem:
        raise DaqError(f"not an atom file: {path.name}")
    sanitized, _, seq = stem.rpartition("__")
    return sanitized, int(seq)
