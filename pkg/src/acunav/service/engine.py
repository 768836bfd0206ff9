"""Deterministic session core for the guidance service.

The engine owns one GuidanceSession plus the needle pose filter and turns
each inbound client message into an ordered list of outbound messages.  It
performs no I/O and draws no randomness, so feeding it the same scene and
the same inbound sequence reproduces the same outbound bytes; the host
(server.py) only moves frames between sockets and this object.
"""

from __future__ import annotations

import json
from pathlib import Path

from ..guidance import (
    GuidanceSession,
    advance,
    adjust_trajectory,
    compute_guidance,
    compute_two_ring,
)
from ..rigid import RigidTransform, needle_to_world
from ..tracking import (
    NEEDLE_AXIS_IN_TOOL,
    NEEDLE_TIP_IN_TOOL,
    KalmanConfig,
    KalmanState,
    PoseObservation,
    kalman_step,
)
from .scene import SceneBundle, extract_meshes
from .wire import PROTOCOL_VERSION, WireError, decode, encode, make

# message types the host fans out to every client; the rest go to the sender
BROADCAST_TYPES = ("scene", "guidance", "two_ring", "advance_ack")


class SessionEngine:
    def __init__(self, bundle: SceneBundle, filter_enabled: bool = True,
                 seed: int = 0, activation_radius_mm: float = 10.0,
                 optimal_radius_mm: float = 1.5, mode: str = "mruct",
                 filter_config: KalmanConfig | None = None):
        self.bundle = bundle
        self.session = GuidanceSession(
            list(bundle.trajectories),
            activation_radius_mm=activation_radius_mm,
            optimal_radius_mm=optimal_radius_mm,
            mode=mode)
        self.filter_enabled = filter_enabled
        self.filter_config = filter_config or KalmanConfig()
        self.seed = seed
        self._meshes = extract_meshes(bundle)
        self._filter_state: KalmanState | None = None
        self._out_seq = 0
        self._last_in_seq: int | None = None
        self._last_pose_t: float | None = None
        self._last_guidance = None
        self._log: list[dict] = []

    # -- outbound construction -------------------------------------------

    def _make(self, type_: str, payload: dict) -> dict:
        msg = make(type_, self._out_seq, payload)
        self._out_seq += 1
        return msg

    def _error(self, code: str, detail: str, ref_seq=None) -> dict:
        return self._make("error", {"code": code, "detail": detail,
                                    "ref_seq": ref_seq})

    def _scene_message(self) -> dict:
        s = self.session
        return self._make("scene", {
            "dims": list(self.bundle.volume.dims),
            "spacing_mm": list(self.bundle.volume.spacing),
            "trajectories": [t.to_json() for t in s.trajectories],
            "active_index": s.active_index,
            "activation_radius_mm": s.activation_radius_mm,
            "optimal_radius_mm": s.optimal_radius_mm,
            "mode": s.mode,
            "meshes": self._meshes})

    def connect_messages(self) -> list[dict]:
        """Greeting sequence for a newly accepted client."""
        return [self._make("hello", {"version": PROTOCOL_VERSION}),
                self._scene_message()]

    # -- inbound handling -------------------------------------------------

    def handle_raw(self, text: str) -> list[dict]:
        """Decode one frame and handle it; framing errors become error
        messages rather than dropped connections."""
        try:
            msg = decode(text)
        except WireError as exc:
            return [self._error(exc.code, exc.detail)]
        return self.handle(msg)

    def handle(self, msg: dict) -> list[dict]:
        seq = msg["seq"]
        if self._last_in_seq is not None and seq <= self._last_in_seq:
            return [self._error(
                "bad_sequence",
                f"seq {seq} not after {self._last_in_seq}", seq)]
        self._last_in_seq = seq

        type_ = msg["type"]
        payload = msg["payload"]
        try:
            if type_ == "hello":
                return self._on_hello(payload, seq)
            if type_ == "needle_pose":
                return self._on_needle_pose(payload, seq)
            if type_ == "adjust_trajectory":
                return self._on_adjust(payload, seq)
            if type_ == "next_trajectory":
                return self._on_next(payload, seq)
            if type_ == "session_log":
                return [self._make("session_log", {"entries": list(self._log)})]
        except WireError as exc:
            return [self._error(exc.code, exc.detail, seq)]
        return [self._error("unknown_type",
                            f"clients do not send '{type_}'", seq)]

    def _on_hello(self, payload: dict, seq: int) -> list[dict]:
        version = payload.get("version")
        if version != PROTOCOL_VERSION:
            return [self._error(
                "unsupported_version",
                f"server speaks version {PROTOCOL_VERSION}, client sent "
                f"{version!r}", seq)]
        return []

    def _on_needle_pose(self, payload: dict, seq: int) -> list[dict]:
        try:
            t = float(payload["t"])
            pose = RigidTransform.from_json(payload["pose"])
        except (KeyError, TypeError, ValueError) as exc:
            raise WireError("bad_pose", str(exc)) from exc
        if self._last_pose_t is not None and t <= self._last_pose_t:
            return [self._error(
                "stale_pose", f"t {t} not after {self._last_pose_t}", seq)]
        self._last_pose_t = t

        if self.filter_enabled:
            if self._filter_state is None:
                self._filter_state = KalmanState.from_pose(
                    pose, t, self.filter_config)
            else:
                self._filter_state, pose = kalman_step(
                    self._filter_state,
                    PoseObservation(t, "needle", None, pose))

        tip, axis = needle_to_world(NEEDLE_TIP_IN_TOOL, NEEDLE_AXIS_IN_TOOL,
                                    pose, self.bundle.sens_to_world)
        guidance = compute_guidance(self.session, tip, axis)
        rings = compute_two_ring(self.session, tip, axis)
        self._last_guidance = guidance
        return [
            self._make("guidance",
                       {**guidance.to_json(), "t": t, "pose_seq": seq}),
            self._make("two_ring",
                       {**rings.to_json(), "t": t, "pose_seq": seq}),
        ]

    def _on_adjust(self, payload: dict, seq: int) -> list[dict]:
        if "index" not in payload or not isinstance(payload["index"], int):
            raise WireError("bad_index", "payload needs an integer index")
        index = payload["index"]
        t = float(payload.get("t", seq))
        try:
            adjust_trajectory(self.session, index,
                              payload.get("entry_mm"), payload.get("end_mm"),
                              timestamp=t)
        except ValueError as exc:
            code = ("bad_index" if "index" in str(exc)
                    else "degenerate_trajectory")
            raise WireError(code, str(exc)) from exc
        traj = self.session.trajectories[index]
        self._log.append({"kind": "adjust", "index": index, "t": t,
                          "entry_mm": traj.entry.tolist(),
                          "end_mm": traj.end.tolist()})
        return [self._scene_message()]

    def _on_next(self, payload: dict, seq: int) -> list[dict]:
        try:
            advance(self.session, self._last_guidance)
        except ValueError as exc:
            raise WireError("no_more_trajectories", str(exc)) from exc
        self._log.append({"kind": "advance", "t": float(payload.get("t", seq)),
                          "to_index": self.session.active_index})
        return [self._make("advance_ack",
                           {"active_index": self.session.active_index}),
                self._scene_message()]


# ---------------------------------------------------------------------------
# Record / replay
# ---------------------------------------------------------------------------

def replay_log(bundle: SceneBundle, log_path, filter_enabled: bool = True,
               seed: int = 0) -> list[str]:
    """Re-run the inbound half of a recorded session through a fresh engine
    and return the outbound frames it produces, in order.

    The record file is JSON Lines with {"dir": "in"|"out", "raw": frame};
    comparing the result against the recorded "out" lines checks protocol
    determinism."""
    engine = SessionEngine(bundle, filter_enabled=filter_enabled, seed=seed)
    out = [encode(m) for m in engine.connect_messages()]
    with open(log_path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            entry = json.loads(line)
            if entry["dir"] == "in":
                out.extend(encode(m) for m in engine.handle_raw(entry["raw"]))
    return out


def recorded_out_lines(log_path) -> list[str]:
    out = []
    with open(log_path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                entry = json.loads(line)
                if entry["dir"] == "out":
                    out.append(entry["raw"])
    return out
