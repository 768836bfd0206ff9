"""Marker pose streams: simulated observations, rigid pose recovery,
Kalman smoothing, and frame-to-frame interpolation.

The filter runs two decoupled estimators per tracked body: a linear
constant-velocity filter on position and a linearized small-angle error
filter on orientation (unit quaternion plus angular rate).  Process noise
follows the piecewise white-acceleration model, so the config parameters
are accelerations (mm/s^2, deg/s^2) and measurement standard deviations
(mm, deg).  None of the defaults come from measured hardware; tune them
per camera.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .rigid import (
    MarkerGeometry,
    RigidTransform,
    fit_rigid,
    matrix_from_quat,
    quat_from_matrix,
    quat_multiply,
    quat_slerp,
)

BODIES = ("bracelet", "needle")

# needle tool geometry: tip offset and pointing axis in the tool frame,
# shared by the pose simulator and the session service
NEEDLE_TIP_IN_TOOL = (0.0, 0.0, -120.0)
NEEDLE_AXIS_IN_TOOL = (0.0, 0.0, -1.0)


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------

@dataclass
class PoseObservation:
    """One tracker frame for one body.

    A valid frame carries either raw marker positions in the sensor frame,
    a derived pose, or both.  An invalid frame (dropout) carries neither.
    """

    timestamp: float
    body: str
    markers: np.ndarray | None = None
    pose: RigidTransform | None = None
    valid: bool = True

    def __post_init__(self):
        self.timestamp = float(self.timestamp)
        if self.body not in BODIES:
            raise ValueError(f"unknown body '{self.body}'")
        if self.markers is not None:
            self.markers = np.asarray(self.markers, dtype=np.float64)
            if self.markers.ndim != 2 or self.markers.shape[1] != 3:
                raise ValueError("markers must have shape (n, 3)")
        if self.valid:
            if self.markers is None and self.pose is None:
                raise ValueError("valid observation needs markers or a pose")
            if self.markers is not None and not np.isfinite(self.markers).all():
                raise ValueError("valid observation has non-finite markers")

    def to_json(self) -> dict:
        obj = {"t": self.timestamp, "body": self.body, "valid": self.valid}
        obj["markers"] = None if self.markers is None else self.markers.tolist()
        obj["pose"] = None if self.pose is None else self.pose.to_json()
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "PoseObservation":
        try:
            pose = obj.get("pose")
            return cls(obj["t"], obj["body"], obj["markers"],
                       None if pose is None else RigidTransform.from_json(pose),
                       obj["valid"])
        except KeyError as exc:
            raise ValueError(f"observation JSON missing key {exc}") from exc


def save_stream(observations: Sequence[PoseObservation], path) -> None:
    """One observation per line (JSON Lines)."""
    with open(path, "w") as f:
        for obs in observations:
            f.write(json.dumps(obs.to_json()) + "\n")


def load_stream(path) -> list[PoseObservation]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(PoseObservation.from_json(json.loads(line)))
    return out


def standard_markers(body: str) -> MarkerGeometry:
    """Non-coplanar four-marker layouts used by the simulator and CLI."""
    if body == "bracelet":
        pts = [(0.0, 0.0, 0.0), (42.0, 0.0, 0.0),
               (0.0, 38.0, 0.0), (15.0, 14.0, 26.0)]
    elif body == "needle":
        pts = [(0.0, 0.0, 0.0), (26.0, 0.0, 0.0),
               (0.0, 24.0, 0.0), (9.0, 8.0, 17.0)]
    else:
        raise ValueError(f"unknown body '{body}'")
    return MarkerGeometry(body, pts)


def simulate_stream(true_motion: Callable[[float], RigidTransform],
                    geometry: MarkerGeometry,
                    n_frames: int,
                    rate_hz: float = 30.0,
                    noise_mm: float = 0.0,
                    dropout: float = 0.0,
                    seed: int = 0) -> list[PoseObservation]:
    """Sample a motion at fixed rate and emit noisy marker observations.

    Noise is iid Gaussian per marker coordinate; dropout marks whole frames
    invalid.  The random draws are consumed at every frame, so streams with
    the same seed are identical regardless of which frames drop.
    """
    if rate_hz <= 0:
        raise ValueError("rate must be positive")
    if not 0.0 <= dropout < 1.0:
        raise ValueError("dropout must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    body = geometry.name
    out = []
    for k in range(n_frames):
        t = k / rate_hz
        pose = true_motion(t)
        drop = rng.uniform() < dropout
        noise = rng.normal(0.0, 1.0, size=geometry.points_mm.shape) * noise_mm
        if drop:
            out.append(PoseObservation(t, body, None, None, valid=False))
        else:
            seen = pose.rotation @ geometry.points_mm.T
            seen = seen.T + pose.translation + noise
            out.append(PoseObservation(t, body, seen))
    return out


def observations_to_pose(geometry: MarkerGeometry, observed,
                         visible=None) -> RigidTransform:
    """Rigid fit of the marker layout to one observed frame.

    `visible` masks occluded markers; by default any row with a non-finite
    coordinate counts as occluded.  At least 3 markers must remain.
    """
    observed = np.asarray(observed, dtype=np.float64)
    if observed.shape != geometry.points_mm.shape:
        raise ValueError(
            f"expected {geometry.points_mm.shape} marker positions, "
            f"got {observed.shape}")
    if visible is None:
        visible = np.isfinite(observed).all(axis=1)
    idx = np.flatnonzero(visible)
    if idx.size < 3:
        raise ValueError(f"only {idx.size} visible markers; need >= 3")
    pose, _ = fit_rigid(geometry.points_mm[idx], observed[idx])
    return pose


# ---------------------------------------------------------------------------
# Kalman filter
# ---------------------------------------------------------------------------

@dataclass
class KalmanConfig:
    process_sigma_mm: float = 20.0    # white acceleration, mm/s^2
    process_sigma_deg: float = 20.0   # white angular acceleration, deg/s^2
    measure_sigma_mm: float = 0.2
    measure_sigma_deg: float = 0.5

    def __post_init__(self):
        for name in ("process_sigma_mm", "process_sigma_deg",
                     "measure_sigma_mm", "measure_sigma_deg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} cannot be negative")


@dataclass
class KalmanState:
    """Decoupled translation / rotation filter state for one body.

    trans = [position, velocity] with covariance trans_cov;
    quat is the nominal orientation, ang the angular rate (rad/s), and
    rot_cov the covariance of the small-angle error state [dtheta, drate].
    """

    timestamp: float
    trans: np.ndarray
    trans_cov: np.ndarray
    quat: np.ndarray
    ang: np.ndarray
    rot_cov: np.ndarray
    config: KalmanConfig = field(default_factory=KalmanConfig)

    def __post_init__(self):
        self.trans = np.asarray(self.trans, dtype=np.float64).reshape(6)
        self.trans_cov = np.asarray(self.trans_cov,
                                    dtype=np.float64).reshape(6, 6)
        self.quat = np.asarray(self.quat, dtype=np.float64).reshape(4)
        self.ang = np.asarray(self.ang, dtype=np.float64).reshape(3)
        self.rot_cov = np.asarray(self.rot_cov,
                                  dtype=np.float64).reshape(6, 6)
        for P in (self.trans_cov, self.rot_cov):
            if np.linalg.norm(P - P.T) > 1e-9 * max(np.linalg.norm(P), 1.0):
                raise ValueError("covariance not symmetric")
            if np.linalg.eigvalsh(P).min() < -1e-9:
                raise ValueError("covariance not positive semi-definite")

    @classmethod
    def from_pose(cls, pose: RigidTransform, timestamp: float,
                  config: KalmanConfig | None = None) -> "KalmanState":
        """Start a filter at an observed pose with zero velocity and a wide
        velocity prior."""
        cfg = config or KalmanConfig()
        var_p = max(cfg.measure_sigma_mm, 1e-3) ** 2
        var_r = max(np.deg2rad(cfg.measure_sigma_deg), 1e-5) ** 2
        trans = np.concatenate([pose.translation, np.zeros(3)])
        trans_cov = np.diag([var_p] * 3 + [1e4] * 3)
        rot_cov = np.diag([var_r] * 3 + [10.0] * 3)
        return cls(timestamp, trans, trans_cov,
                   quat_from_matrix(pose.rotation), np.zeros(3), rot_cov, cfg)

    @property
    def pose(self) -> RigidTransform:
        return RigidTransform(matrix_from_quat(self.quat), self.trans[:3])


def _quat_exp(rotvec) -> np.ndarray:
    """Unit quaternion for a rotation vector (angle * axis, radians)."""
    rotvec = np.asarray(rotvec, dtype=np.float64)
    angle = np.linalg.norm(rotvec)
    if angle < 1e-12:
        q = np.array([1.0, *(0.5 * rotvec)])
        return q / np.linalg.norm(q)
    axis = rotvec / angle
    return np.array([np.cos(angle / 2), *(np.sin(angle / 2) * axis)])


def _quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def _quat_log(q) -> np.ndarray:
    """Rotation vector of a unit quaternion, angle in [0, pi]."""
    w = abs(q[0])
    vec = q[1:] if q[0] >= 0 else -q[1:]
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        return 2.0 * vec
    return 2.0 * np.arctan2(norm, w) * vec / norm


def _cv_model(dt: float, accel_sigma: float):
    """Constant-velocity transition and piecewise white-acceleration
    process noise for a 3D position/velocity block."""
    eye = np.eye(3)
    F = np.block([[eye, dt * eye], [np.zeros((3, 3)), eye]])
    q = accel_sigma ** 2
    Q = q * np.block([[dt ** 4 / 4 * eye, dt ** 3 / 2 * eye],
                      [dt ** 3 / 2 * eye, dt ** 2 * eye]])
    return F, Q


def _joseph_update(x, P, z, meas_var):
    """Position-only measurement update, Joseph form for PSD stability."""
    H = np.zeros((3, 6))
    H[:, :3] = np.eye(3)
    R = meas_var * np.eye(3)
    S = P[:3, :3] + R
    K = np.linalg.solve(S.T, (P @ H.T).T).T
    x = x + K @ (z - x[:3])
    A = np.eye(6) - K @ H
    P = A @ P @ A.T + K @ R @ K.T
    return x, 0.5 * (P + P.T), K


def kalman_step(state: KalmanState,
                obs: PoseObservation) -> tuple[KalmanState, RigidTransform]:
    """Advance the filter to the observation's timestamp.

    Valid frames run predict + update; dropout frames predict only, so the
    covariance grows.  The observation must carry a derived pose when valid
    (see observations_to_pose)."""
    dt = obs.timestamp - state.timestamp
    if dt <= 0:
        raise ValueError(
            f"timestamp {obs.timestamp} not after state {state.timestamp}")
    cfg = state.config

    F, Q = _cv_model(dt, cfg.process_sigma_mm)
    x = F @ state.trans
    Pt = F @ state.trans_cov @ F.T + Q

    Fr, Qr = _cv_model(dt, np.deg2rad(cfg.process_sigma_deg))
    quat = quat_multiply(_quat_exp(state.ang * dt), state.quat)
    ang = state.ang.copy()
    Pr = Fr @ state.rot_cov @ Fr.T + Qr

    if obs.valid:
        if obs.pose is None:
            raise ValueError("valid observation carries no pose; derive one "
                             "with observations_to_pose first")
        x, Pt, _ = _joseph_update(x, Pt, obs.pose.translation,
                                  cfg.measure_sigma_mm ** 2)
        # innovation = world-frame rotation vector taking the predicted
        # orientation to the observed one
        err = quat_multiply(quat_from_matrix(obs.pose.rotation),
                            _quat_conj(quat))
        dtheta = _quat_log(err)
        delta, Pr, _ = _joseph_update(np.zeros(6), Pr, dtheta,
                                      np.deg2rad(cfg.measure_sigma_deg) ** 2)
        quat = quat_multiply(_quat_exp(delta[:3]), quat)
        quat /= np.linalg.norm(quat)
        ang = ang + delta[3:]

    out = KalmanState(obs.timestamp, x, 0.5 * (Pt + Pt.T), quat, ang,
                      0.5 * (Pr + Pr.T), cfg)
    return out, out.pose


def filter_stream(observations: Sequence[PoseObservation],
                  geometry: MarkerGeometry,
                  config: KalmanConfig | None = None,
                  ) -> list[tuple[float, RigidTransform]]:
    """Run the filter over a recorded stream.

    Poses are derived from markers where missing.  Output starts at the
    first valid frame; later dropout frames yield predicted poses."""
    state = None
    out = []
    for obs in observations:
        if obs.valid and obs.pose is None:
            obs = replace(obs, pose=observations_to_pose(geometry,
                                                         obs.markers))
        if state is None:
            if not obs.valid:
                continue
            state = KalmanState.from_pose(obs.pose, obs.timestamp, config)
            out.append((obs.timestamp, obs.pose))
            continue
        state, pose = kalman_step(state, obs)
        out.append((obs.timestamp, pose))
    return out


def interpolate_pose(a: RigidTransform, t_a: float,
                     b: RigidTransform, t_b: float,
                     t: float) -> RigidTransform:
    """Pose at time t between two timestamped poses: linear in translation,
    spherical in rotation."""
    if not t_b > t_a:
        raise ValueError(f"degenerate interval [{t_a}, {t_b}]")
    u = (t - t_a) / (t_b - t_a)
    trans = (1.0 - u) * a.translation + u * b.translation
    q = quat_slerp(quat_from_matrix(a.rotation), quat_from_matrix(b.rotation),
                   u)
    return RigidTransform(matrix_from_quat(q), trans)
