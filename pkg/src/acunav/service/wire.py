"""Message framing for the guidance stream.

One JSON object per text frame, canonical form (sorted keys, no spaces) so
recorded sessions replay byte-identically.  Every message carries a type
tag, a per-direction strictly increasing sequence number, and a payload.
"""

from __future__ import annotations

import json

PROTOCOL_VERSION = 1

TYPES = ("hello", "scene", "needle_pose", "guidance", "two_ring",
         "adjust_trajectory", "next_trajectory", "advance_ack", "error",
         "session_log")


class WireError(ValueError):
    """Malformed or protocol-violating message."""

    def __init__(self, code: str, detail: str):
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail


def make(type_: str, seq: int, payload: dict) -> dict:
    if type_ not in TYPES:
        raise WireError("unknown_type", f"'{type_}' is not a wire type")
    return {"type": type_, "seq": seq, "payload": payload}


def encode(msg: dict) -> str:
    return json.dumps(msg, sort_keys=True, separators=(",", ":"))


def decode(text: str) -> dict:
    try:
        msg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise WireError("bad_json", str(exc)) from exc
    if not isinstance(msg, dict):
        raise WireError("bad_json", "frame is not a JSON object")
    type_ = msg.get("type")
    if type_ not in TYPES:
        raise WireError("unknown_type", f"'{type_}' is not a wire type")
    seq = msg.get("seq")
    if not isinstance(seq, int) or isinstance(seq, bool) or seq < 0:
        raise WireError("bad_sequence", "seq must be a non-negative integer")
    if "payload" not in msg or not isinstance(msg["payload"], dict):
        raise WireError("bad_json", "payload must be a JSON object")
    return msg
