"""Data atoms: the single unit of all acquired and monitored data.

An atom bundles a (possibly hierarchical) name, a triple timestamp and a
typed payload, and serializes to a fixed JSON interchange layout so that
every producer and consumer in the system agrees on the bytes.
"""

from __future__ import annotations

import json
import math
import re
import time
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

DISPLAY_PATTERN = "%H:%M:%S.%f %m/%d/%Y"

_NAME_RE = re.compile(r"^[A-Za-z0-9_.\-]+(/[A-Za-z0-9_.\-]+)*$")

# Keys the interchange layout claims for itself; cluster members may not
# use them.
RESERVED_FIELD_NAMES = frozenset({"Type", "Timestamp"})

I32_MIN = -(2**31)
I32_MAX = 2**31 - 1
U32_MAX = 2**32 - 1
U64_MAX = 2**64 - 1


class AtomError(ValueError):
    """Base class for atom validation and codec errors."""


class MalformedDocument(AtomError):
    """The interchange text is not syntactically valid."""


class SchemaViolation(AtomError):
    """The document parses but does not follow the interchange layout."""


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise AtomError(msg)


@dataclass(frozen=True)
class AtomTimestamp:
    """Triple timestamp: display string, epoch seconds/nanos, optional RF clock.

    ``display`` is rendered in the local timezone of the producing process
    and is carried verbatim through encode/decode; ``epoch_seconds`` and
    ``epoch_nanos`` are authoritative.
    """

    display: str
    epoch_seconds: int
    epoch_nanos: int
    rf_clock: int | None = None

    def validate(self) -> None:
        _check(0 <= self.epoch_seconds <= U64_MAX, "epoch_seconds out of u64 range")
        _check(0 <= self.epoch_nanos < 1_000_000_000, "epoch_nanos must be < 1e9")
        if self.rf_clock is not None:
            _check(0 <= self.rf_clock <= U64_MAX, "rf_clock out of u64 range")
        # display must parse at all; cross-checking against the epoch fields
        # is only meaningful in the producing timezone (see check_display).
        datetime.strptime(self.display, DISPLAY_PATTERN)

    def check_display(self) -> bool:
        """True if display re-parses (in the local timezone) to the epoch
        fields with nanoseconds truncated to microseconds."""
        dt = datetime.strptime(self.display, DISPLAY_PATTERN)
        return (
            int(dt.timestamp()) == self.epoch_seconds
            and dt.microsecond == self.epoch_nanos // 1000
        )


def make_timestamp(epoch_seconds: int, epoch_nanos: int, rf_clock: int | None = None) -> AtomTimestamp:
    """Build a timestamp whose display string is derived from the epoch."""
    dt = datetime.fromtimestamp(epoch_seconds).replace(microsecond=epoch_nanos // 1000)
    ts = AtomTimestamp(dt.strftime(DISPLAY_PATTERN), epoch_seconds, epoch_nanos, rf_clock)
    ts.validate()
    return ts


def timestamp_now(rf_clock: int | None = None) -> AtomTimestamp:
    ns = time.time_ns()
    return make_timestamp(ns // 1_000_000_000, ns % 1_000_000_000, rf_clock)


# --- payloads ---------------------------------------------------------------

# Scalar type tags of the interchange format. Bool and Str extend the
# DBL/I32/SGL vocabulary observed in the wild.
TAG_F64 = "DBL"
TAG_I32 = "I32"
TAG_F32 = "SGL"
TAG_BOOL = "Bool"
TAG_STR = "Str"
TAG_ARRAY = "Array"
TAG_CLUSTER = ""

_SCALAR_TAGS = (TAG_F64, TAG_I32, TAG_F32, TAG_BOOL, TAG_STR)


def widen_f32(value: float) -> float:
    """The exact 64-bit value of ``value`` squeezed through 32-bit floats."""
    return float(np.float32(value))


@dataclass(frozen=True)
class Scalar:
    """A tagged scalar. F32 values are normalized to their widened form at
    construction so equality and encoding are exact."""

    tag: str
    value: float | int | bool | str

    def __post_init__(self):
        if self.tag == TAG_F32:
            object.__setattr__(self, "value", widen_f32(float(self.value)))
        elif self.tag == TAG_F64:
            object.__setattr__(self, "value", float(self.value))

    def validate(self) -> None:
        _check(self.tag in _SCALAR_TAGS, f"unknown scalar tag {self.tag!r}")
        v = self.value
        if self.tag in (TAG_F64, TAG_F32):
            _check(isinstance(v, float), f"{self.tag} value must be float")
            _check(math.isfinite(v), "non-finite floats cannot be interchanged")
        elif self.tag == TAG_I32:
            _check(isinstance(v, int) and not isinstance(v, bool), "I32 value must be int")
            _check(I32_MIN <= v <= I32_MAX, "I32 value out of range")
        elif self.tag == TAG_BOOL:
            _check(isinstance(v, bool), "Bool value must be bool")
        elif self.tag == TAG_STR:
            _check(isinstance(v, str), "Str value must be str")


@dataclass(frozen=True)
class ScalarArray:
    """Homogeneous 1-D array of scalars with a declared element tag.

    The wire layout does not carry the element tag, so float arrays compare
    equal across the F32/F64 distinction once widened (F32 elements are
    normalized at construction).
    """

    elem_tag: str
    values: tuple

    def __post_init__(self):
        vals = tuple(self.values)
        if self.elem_tag == TAG_F32:
            vals = tuple(widen_f32(float(v)) for v in vals)
        elif self.elem_tag == TAG_F64:
            vals = tuple(float(v) for v in vals)
        object.__setattr__(self, "values", vals)

    @property
    def dims(self) -> str:
        return f"[{len(self.values)}]"

    def validate(self) -> None:
        _check(self.elem_tag in _SCALAR_TAGS, f"unknown array element tag {self.elem_tag!r}")
        for v in self.values:
            Scalar(self.elem_tag, v).validate()

    def __eq__(self, other):
        if not isinstance(other, ScalarArray):
            return NotImplemented
        if not self.values and not other.values:
            # the wire carries no element tag, so empty arrays are one value
            return True
        a, b = self.elem_tag, other.elem_tag
        if {a, b} <= {TAG_F32, TAG_F64}:
            return self.values == other.values
        return a == b and self.values == other.values

    def __hash__(self):
        if not self.values:
            return hash(("[]",))
        kind = TAG_F64 if self.elem_tag == TAG_F32 else self.elem_tag
        return hash((kind, self.values))


@dataclass(frozen=True)
class Cluster:
    """Named map of payloads, canonically ordered by field name.

    The interchange layout sorts keys, so insertion order cannot survive a
    round trip; canonical order keeps encode/decode lossless.
    """

    fields: tuple  # tuple of (name, payload)

    def __post_init__(self):
        norm = sorted(((str(k), v) for k, v in self.fields), key=lambda kv: kv[0])
        object.__setattr__(self, "fields", tuple(norm))

    def validate(self) -> None:
        names = [k for k, _ in self.fields]
        _check(len(set(names)) == len(names), "cluster field names must be unique")
        for k, v in self.fields:
            _check(k not in RESERVED_FIELD_NAMES, f"field name {k!r} is reserved")
            _check(bool(k), "cluster field names must be non-empty")
            validate_payload(v)

    def get(self, name: str):
        for k, v in self.fields:
            if k == name:
                return v
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(k == name for k, _ in self.fields)


Payload = Scalar | ScalarArray | Cluster


def validate_payload(p: Payload) -> None:
    if isinstance(p, (Scalar, ScalarArray, Cluster)):
        p.validate()
    else:
        raise AtomError(f"not a payload: {type(p).__name__}")


@dataclass(frozen=True)
class DataAtom:
    name: str
    timestamp: AtomTimestamp
    data: Payload

    def validate(self) -> None:
        _check(bool(self.name), "atom name must be non-empty")
        _check(_NAME_RE.match(self.name) is not None,
               f"atom name {self.name!r} must be '/'-separated filesystem-safe segments")
        self.timestamp.validate()
        validate_payload(self.data)


# Convenience constructors used throughout the system.

def f64(v: float) -> Scalar:
    return Scalar(TAG_F64, float(v))


def i32(v: int) -> Scalar:
    return Scalar(TAG_I32, int(v))


def f32(v: float) -> Scalar:
    return Scalar(TAG_F32, float(v))


def boolean(v: bool) -> Scalar:
    return Scalar(TAG_BOOL, bool(v))


def text(v: str) -> Scalar:
    return Scalar(TAG_STR, str(v))


def f64_array(values) -> ScalarArray:
    return ScalarArray(TAG_F64, tuple(float(v) for v in values))


def f32_array(values) -> ScalarArray:
    return ScalarArray(TAG_F32, tuple(values))


def i32_array(values) -> ScalarArray:
    return ScalarArray(TAG_I32, tuple(int(v) for v in values))


def cluster(**fields) -> Cluster:
    return Cluster(tuple(fields.items()))


def cluster_items(items) -> Cluster:
    return Cluster(tuple(items))


def atom(name: str, data: Payload, timestamp: AtomTimestamp | None = None) -> DataAtom:
    a = DataAtom(name, timestamp or timestamp_now(), data)
    a.validate()
    return a


# --- codec ------------------------------------------------------------------

def _payload_to_obj(p: Payload) -> dict:
    if isinstance(p, Scalar):
        return {"Type": p.tag, "__value": p.value}
    if isinstance(p, ScalarArray):
        return {"MemberDims": p.dims, "Type": TAG_ARRAY, "v": list(p.values)}
    if isinstance(p, Cluster):
        obj = {"Type": TAG_CLUSTER}
        for k, v in p.fields:
            obj[k] = _payload_to_obj(v)
        return obj
    raise AtomError(f"not a payload: {type(p).__name__}")


def _timestamp_to_obj(ts: AtomTimestamp) -> dict:
    return {
        "clock": ts.rf_clock if ts.rf_clock is not None else 0,
        "str": ts.display,
        "tv_nsec": ts.epoch_nanos,
        "tv_sec": ts.epoch_seconds,
    }


def atom_to_obj(a: DataAtom) -> list:
    """The nested (parsed-JSON) form of the interchange document."""
    a.validate()
    body = _payload_to_obj(a.data)
    body["Timestamp"] = _timestamp_to_obj(a.timestamp)
    return [{a.name: body}]


def encode_atom(a: DataAtom) -> str:
    """Serialize to the interchange text: one-element top array, lexicographic
    key order, deterministic bytes for identical atoms."""
    return json.dumps(atom_to_obj(a), sort_keys=True, indent=2, ensure_ascii=False)


def _reject_duplicate_keys(pairs):
    keys = [k for k, _ in pairs]
    if len(set(keys)) != len(keys):
        raise SchemaViolation(f"duplicate object keys: {sorted(keys)}")
    return dict(pairs)


def _obj_to_timestamp(obj) -> AtomTimestamp:
    if not isinstance(obj, dict):
        raise SchemaViolation("Timestamp must be an object")
    for key in ("clock", "str", "tv_nsec", "tv_sec"):
        if key not in obj:
            raise SchemaViolation(f"Timestamp missing key {key!r}")
    clock = obj["clock"]
    ts = AtomTimestamp(
        display=obj["str"],
        epoch_seconds=obj["tv_sec"],
        epoch_nanos=obj["tv_nsec"],
        rf_clock=None if clock == 0 else clock,
    )
    try:
        ts.validate()
    except AtomError as e:
        raise SchemaViolation(str(e)) from e
    return ts


def _classify_scalar(v) -> str:
    if isinstance(v, bool):
        return TAG_BOOL
    if isinstance(v, int):
        return TAG_I32
    if isinstance(v, float):
        return TAG_F64
    if isinstance(v, str):
        return TAG_STR
    raise SchemaViolation(f"array element {v!r} is not a scalar")


def _obj_to_payload(obj) -> Payload:
    if not isinstance(obj, dict):
        raise SchemaViolation("payload must be an object")
    if "Type" not in obj:
        raise SchemaViolation("payload object missing Type tag")
    tag = obj["Type"]
    if tag == TAG_CLUSTER:
        items = []
        for k, v in obj.items():
            if k in RESERVED_FIELD_NAMES:
                continue
            items.append((k, _obj_to_payload(v)))
        return Cluster(tuple(items))
    if tag == TAG_ARRAY:
        if "v" not in obj or "MemberDims" not in obj:
            raise SchemaViolation("array payload requires MemberDims and v")
        values = obj["v"]
        if not isinstance(values, list):
            raise SchemaViolation("array v must be a list")
        if obj["MemberDims"] != f"[{len(values)}]":
            raise SchemaViolation(
                f"MemberDims {obj['MemberDims']!r} does not match {len(values)} elements")
        if values:
            elem = _classify_scalar(values[0])
            for v in values[1:]:
                if _classify_scalar(v) != elem:
                    raise SchemaViolation("array elements are not homogeneous")
        else:
            elem = TAG_F64
        if elem == TAG_I32:
            for v in values:
                if not I32_MIN <= v <= I32_MAX:
                    # out-of-range ints can only have been wide floats
                    raise SchemaViolation(f"array int {v} out of I32 range")
        return ScalarArray(elem, tuple(values))
    if tag in _SCALAR_TAGS:
        if "__value" not in obj:
            raise SchemaViolation(f"scalar payload of type {tag!r} missing __value")
        value = obj["__value"]
        if tag in (TAG_F64, TAG_F32) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        s = Scalar(tag, value)
        try:
            s.validate()
        except AtomError as e:
            raise SchemaViolation(str(e)) from e
        return s
    raise SchemaViolation(f"unknown Type tag {tag!r}")


def obj_to_atom(doc) -> DataAtom:
    if not isinstance(doc, list) or len(doc) != 1 or not isinstance(doc[0], dict):
        raise SchemaViolation("document must be a one-element array of one object")
    if len(doc[0]) != 1:
        raise SchemaViolation("top object must have exactly the atom name as key")
    (name, body), = doc[0].items()
    if not isinstance(body, dict):
        raise SchemaViolation("atom body must be an object")
    if "Timestamp" not in body:
        raise SchemaViolation("atom body missing Timestamp")
    ts = _obj_to_timestamp(body["Timestamp"])
    payload_obj = {k: v for k, v in body.items() if k != "Timestamp"}
    payload = _obj_to_payload(payload_obj)
    a = DataAtom(name, ts, payload)
    try:
        a.validate()
    except AtomError as e:
        raise SchemaViolation(str(e)) from e
    return a


def decode_atom(document: str) -> DataAtom:
    try:
        doc = json.loads(document, object_pairs_hook=_reject_duplicate_keys)
    except json.JSONDecodeError as e:
        raise MalformedDocument(str(e)) from e
    return obj_to_atom(doc)


# --- payload helpers used by consumers --------------------------------------

def payload_type_signature(p: Payload) -> str:
    """Stable structural signature used to enforce name/type stability."""
    if isinstance(p, Scalar):
        return p.tag
    if isinstance(p, ScalarArray):
        tag = TAG_F64 if p.elem_tag == TAG_F32 else p.elem_tag
        return f"Array<{tag}>"
    if isinstance(p, Cluster):
        inner = ",".join(f"{k}:{payload_type_signature(v)}" for k, v in p.fields)
        return f"Cluster{{{inner}}}"
    raise AtomError(f"not a payload: {type(p).__name__}")


def payload_to_python(p: Payload):
    """Plain-Python view: scalars unwrap, arrays become lists, clusters dicts."""
    if isinstance(p, Scalar):
        return p.value
    if isinstance(p, ScalarArray):
        return list(p.values)
    if isinstance(p, Cluster):
        return {k: payload_to_python(v) for k, v in p.fields}
    raise AtomError(f"not a payload: {type(p).__name__}")


def python_to_payload(v) -> Payload:
    """Best-effort inverse of payload_to_python for plumbing values."""
    if isinstance(v, (Scalar, ScalarArray, Cluster)):
        return v
    if isinstance(v, bool):
        return boolean(v)
    if isinstance(v, int):
        return i32(v) if I32_MIN <= v <= I32_MAX else f64(float(v))
    if isinstance(v, float):
        return f64(v)
    if isinstance(v, str):
        return text(v)
    if isinstance(v, np.ndarray):
        return f64_array(np.asarray(v, dtype=float).ravel().tolist())
    if isinstance(v, (list, tuple)):
        if all(isinstance(x, bool) for x in v):
            return ScalarArray(TAG_BOOL, tuple(v))
        if all(isinstance(x, int) and not isinstance(x, bool) for x in v):
            return i32_array(v)
        if all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
            return f64_array(v)
        if all(isinstance(x, str) for x in v):
            return ScalarArray(TAG_STR, tuple(v))
        raise AtomError("mixed-type sequences cannot become arrays")
    if isinstance(v, dict):
        return cluster_items((k, python_to_payload(x)) for k, x in v.items())
    if v is None:
        return text("")
    raise AtomError(f"cannot convert {type(v).__name__} to payload")
