"""Needle guidance state: tip/rotation indicators, the two-ring baseline,
trajectory adjustment, and multi-trajectory session progression.

All geometry is computed in the world frame.  The tip indicator projects the
needle tip onto the active reference segment; the rotation indicator turns on
once the tip is within the activation radius of that projection (inclusive at
the boundary).  The two-ring view instead reports the distance from the
infinite needle line to the entry and end points, with an in-plane direction
hint per ring.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .rigid import RigidTransform, apply, apply_direction, invert
from .volume import Mask3D
from .warp import Trajectory

MODES = ("mruct", "two_ring")


@dataclass
class GuidanceState:
    """Snapshot of the tip/rotation indicator for one needle pose."""

    tip_world: np.ndarray
    projection_point: np.ndarray
    tip_error_mm: float
    rotation_error_deg: float
    mode: str
    depth_fraction: float

    def __post_init__(self):
        self.tip_world = np.asarray(self.tip_world, dtype=np.float64).reshape(3)
        self.projection_point = np.asarray(self.projection_point,
                                           dtype=np.float64).reshape(3)
        if self.tip_error_mm < 0:
            raise ValueError("tip error cannot be negative")
        if not 0.0 <= self.rotation_error_deg <= 180.0:
            raise ValueError("rotation error must lie in [0, 180] degrees")
        if self.mode not in ("TipOnly", "TipAndRotation"):
            raise ValueError(f"unknown guidance mode '{self.mode}'")

    def to_json(self) -> dict:
        return {"tip_world_mm": self.tip_world.tolist(),
                "projection_point_mm": self.projection_point.tolist(),
                "tip_error_mm": self.tip_error_mm,
                "rotation_error_deg": self.rotation_error_deg,
                "mode": self.mode,
                "depth_fraction": self.depth_fraction}

    @classmethod
    def from_json(cls, obj: dict) -> "GuidanceState":
        try:
            return cls(obj["tip_world_mm"], obj["projection_point_mm"],
                       obj["tip_error_mm"], obj["rotation_error_deg"],
                       obj["mode"], obj["depth_fraction"])
        except KeyError as exc:
            raise ValueError(f"guidance JSON missing key {exc}") from exc


@dataclass
class TwoRingState:
    """Baseline indicator: per-endpoint distance from the needle line.

    Direction hints are unit 2-vectors in each ring's plane (the plane
    through the endpoint perpendicular to the reference trajectory),
    expressed in the session's in-plane basis; a zero vector marks the
    degenerate on-axis case."""

    entry_ring_radius_mm: float
    end_ring_radius_mm: float
    entry_dir_hint: np.ndarray
    end_dir_hint: np.ndarray

    def __post_init__(self):
        if self.entry_ring_radius_mm < 0 or self.end_ring_radius_mm < 0:
            raise ValueError("ring radii cannot be negative")
        self.entry_dir_hint = np.asarray(self.entry_dir_hint,
                                         dtype=np.float64).reshape(2)
        self.end_dir_hint = np.asarray(self.end_dir_hint,
                                       dtype=np.float64).reshape(2)

    def to_json(self) -> dict:
        return {"entry_ring_radius_mm": self.entry_ring_radius_mm,
                "end_ring_radius_mm": self.end_ring_radius_mm,
                "entry_dir_hint": self.entry_dir_hint.tolist(),
                "end_dir_hint": self.end_dir_hint.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "TwoRingState":
        try:
            return cls(obj["entry_ring_radius_mm"], obj["end_ring_radius_mm"],
                       obj["entry_dir_hint"], obj["end_dir_hint"])
        except KeyError as exc:
            raise ValueError(f"ring JSON missing key {exc}") from exc


@dataclass
class GuidanceSession:
    """Ordered world-frame trajectories plus progression and tuning state."""

    trajectories: list
    active_index: int = 0
    activation_radius_mm: float = 10.0
    optimal_radius_mm: float = 1.5
    mode: str = "mruct"
    history: list = field(default_factory=list)
    completed: list = field(default_factory=list)

    def __post_init__(self):
        if not self.trajectories:
            raise ValueError("session needs at least one trajectory")
        for t in self.trajectories:
            if t.frame != "world":
                raise ValueError(
                    f"trajectory '{t.name}' is in frame '{t.frame}'; "
                    f"sessions run in the world frame")
        if not 0 <= self.active_index < len(self.trajectories):
            raise ValueError("active index out of range")
        if self.activation_radius_mm <= 0 or self.optimal_radius_mm <= 0:
            raise ValueError("radii must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @property
    def active(self) -> Trajectory:
        return self.trajectories[self.active_index]

    def to_json(self) -> dict:
        return {"trajectories": [t.to_json() for t in self.trajectories],
                "active_index": self.active_index,
                "activation_radius_mm": self.activation_radius_mm,
                "optimal_radius_mm": self.optimal_radius_mm,
                "mode": self.mode,
                "history": [dict(h) for h in self.history],
                "completed": [dict(c) for c in self.completed]}

    @classmethod
    def from_json(cls, obj: dict) -> "GuidanceSession":
        try:
            return cls([Trajectory.from_json(t) for t in obj["trajectories"]],
                       obj.get("active_index", 0),
                       obj.get("activation_radius_mm", 10.0),
                       obj.get("optimal_radius_mm", 1.5),
                       obj.get("mode", "mruct"),
                       [dict(h) for h in obj.get("history", [])],
                       [dict(c) for c in obj.get("completed", [])])
        except KeyError as exc:
            raise ValueError(f"session JSON missing key {exc}") from exc


def _check_axis(axis_world) -> np.ndarray:
    axis = np.asarray(axis_world, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(axis) - 1.0) > 1e-6:
        raise ValueError("needle axis must be unit length")
    return axis


def compute_guidance(session: GuidanceSession, tip_world,
                     axis_world) -> GuidanceState:
    """Tip indicator state for the active trajectory.

    The projection point is the closest point on the finite entry-to-end
    segment; depth_fraction is the unclamped signed progress along the
    trajectory direction (0 at entry, 1 at end, negative before entry)."""
    tip = np.asarray(tip_world, dtype=np.float64).reshape(3)
    axis = _check_axis(axis_world)
    traj = session.active
    u = traj.direction
    along = float(np.dot(tip - traj.entry, u))
    proj = traj.entry + np.clip(along, 0.0, traj.length) * u
    tip_err = float(np.linalg.norm(tip - proj))
    cosang = np.clip(np.dot(axis, u), -1.0, 1.0)
    rot_err = float(np.degrees(np.arccos(cosang)))
    mode = ("TipAndRotation" if tip_err <= session.activation_radius_mm
            else "TipOnly")
    return GuidanceState(tip, proj, tip_err, rot_err, mode,
                         along / traj.length)


def _ring_basis(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal basis of the plane perpendicular to u."""
    helper = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(u, helper)) > 0.9:
        helper = np.array([1.0, 0.0, 0.0])
    e1 = np.cross(helper, u)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(u, e1)


def compute_two_ring(session: GuidanceSession, tip_world,
                     axis_world) -> TwoRingState:
    """Ring radii and in-plane hints for the two-ring baseline.

    Each radius is the distance from the infinite needle line to the
    trajectory endpoint; the hint points from the endpoint toward the
    needle line's closest point, projected into the ring plane."""
    tip = np.asarray(tip_world, dtype=np.float64).reshape(3)
    axis = _check_axis(axis_world)
    traj = session.active
    e1, e2 = _ring_basis(traj.direction)

    def ring(p):
        closest = tip + np.dot(p - tip, axis) * axis
        offset = closest - p
        radius = float(np.linalg.norm(offset))
        in_plane = np.array([np.dot(offset, e1), np.dot(offset, e2)])
        norm = np.linalg.norm(in_plane)
        hint = in_plane / norm if norm > 1e-12 else np.zeros(2)
        return radius, hint

    r_entry, h_entry = ring(traj.entry)
    r_end, h_end = ring(traj.end)
    return TwoRingState(r_entry, r_end, h_entry, h_end)


def adjust_trajectory(session: GuidanceSession, index: int,
                      new_entry=None, new_end=None,
                      timestamp: float | None = None) -> GuidanceSession:
    """Replace endpoints of one trajectory and record the change.

    Pass the event timestamp during replay; it defaults to wall time."""
    if not 0 <= index < len(session.trajectories):
        raise ValueError(f"trajectory index {index} out of range")
    old = session.trajectories[index]
    entry = old.entry if new_entry is None else new_entry
    end = old.end if new_end is None else new_end
    updated = Trajectory(old.name, old.frame, entry, end)
    session.trajectories[index] = updated
    session.history.append({
        "index": index,
        "timestamp": time.time() if timestamp is None else float(timestamp),
        "entry_mm": updated.entry.tolist(),
        "end_mm": updated.end.tolist()})
    return session


def advance(session: GuidanceSession,
            final_state: GuidanceState | None = None) -> GuidanceSession:
    """Move to the next trajectory, logging the closing indicator state."""
    if session.active_index + 1 >= len(session.trajectories):
        raise ValueError("already at the last trajectory")
    session.completed.append({
        "index": session.active_index,
        "state": None if final_state is None else final_state.to_json()})
    session.active_index += 1
    return session


def depth_readout(state: GuidanceState, axis_world, labels: Mask3D,
                  image_to_world: RigidTransform,
                  step_mm: float = 0.25) -> list[tuple[int, float]]:
    """First-hit distances from the tip to each labeled structure.

    Marches from the tip along the needle axis through the label volume and
    reports (label, distance_mm) ordered by distance.  Informational only;
    a tip outside the volume yields an empty list."""
    axis = _check_axis(axis_world)
    world_to_image = invert(image_to_world)
    tip = apply(world_to_image, state.tip_world)
    direction = apply_direction(world_to_image, axis)
    spacing = np.asarray(labels.spacing)
    extent = (np.asarray(labels.dims) - 1) * spacing
    if (tip < 0).any() or (tip > extent).any():
        return []

    hits: dict[int, float] = {}
    pos = tip.copy()
    dist = 0.0
    while ((pos >= 0).all() and (pos <= extent).all()):
        idx = tuple(np.clip(np.round(pos / spacing).astype(int), 0,
                            np.asarray(labels.dims) - 1))
        label = int(labels.data[idx])
        if label != 0 and label not in hits:
            hits[label] = dist
        dist += step_mm
        pos = tip + dist * direction
    return sorted(hits.items(), key=lambda kv: kv[1])
