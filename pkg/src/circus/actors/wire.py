"""Newline-delimited JSON framing for the inter-node bus.

Every frame is one UTF-8 JSON object on one line. Envelope frames embed the
payload atom in its nested document form. Control frames (hello, ack, nack,
peer beats, error replication) are plain objects distinguished by "kind".
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .. import atoms

PROTOCOL_VERSION = "1"
DEFAULT_PORT = 4462


class WireError(Exception):
    pass


@dataclass(frozen=True)
class Address:
    node: str
    service: str

    def as_list(self) -> list[str]:
        return [self.node, self.service]


@dataclass(frozen=True)
class Envelope:
    id: int
    src: Address
    dst: Address
    kind: str
    payload: atoms.DataAtom
    sent_at: atoms.AtomTimestamp
    reply_to: int | None = None

    def validate(self) -> None:
        if not self.kind:
            raise WireError("envelope kind must be non-empty")
        if self.src == self.dst:
            raise WireError("bus envelopes require src != dst")


def envelope_frame(env: Envelope) -> bytes:
    obj = {
        "frame": "envelope",
        "id": env.id,
        "src": env.src.as_list(),
        "dst": env.dst.as_list(),
        "kind": env.kind,
        "payload": atoms.atom_to_obj(env.payload),
        "sent_at": {
            "str": env.sent_at.display,
            "tv_sec": env.sent_at.epoch_seconds,
            "tv_nsec": env.sent_at.epoch_nanos,
            "clock": env.sent_at.rf_clock or 0,
        },
    }
    if env.reply_to is not None:
        obj["reply_to"] = env.reply_to
    return json.dumps(obj, ensure_ascii=False).encode() + b"\n"


def control_frame(kind: str, **fields) -> bytes:
    obj = {"frame": "control", "kind": kind}
    obj.update(fields)
    return json.dumps(obj, ensure_ascii=False).encode() + b"\n"


def parse_frame(line: bytes) -> dict:
    try:
        obj = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise WireError(f"bad frame: {e}") from e
    if not isinstance(obj, dict) or "frame" not in obj:
        raise WireError("frames are objects with a 'frame' key")
    return obj


def envelope_from_frame(obj: dict) -> Envelope:
    try:
        ts = obj["sent_at"]
        return Envelope(
            id=obj["id"],
            src=Address(*obj["src"]),
            dst=Address(*obj["dst"]),
            kind=obj["kind"],
            payload=atoms.obj_to_atom(obj["payload"]),
            sent_at=atoms.AtomTimestamp(
                display=ts["str"],
                epoch_seconds=ts["tv_sec"],
                epoch_nanos=ts["tv_nsec"],
                rf_clock=ts["clock"] or None,
            ),
            reply_to=obj.get("reply_to"),
        )
    except (KeyError, TypeError, atoms.AtomError) as e:
        raise WireError(f"bad envelope frame: {e}") from e
