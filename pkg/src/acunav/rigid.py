"""SE(3) transform algebra, point-set fitting, pivot calibration, and the
image-to-world transform chain.

Transforms act on column vectors: apply(t, p) = R @ p + translation.
Serialized form uses unit quaternions in [w, x, y, z] order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .warp import Trajectory

_ORTHO_TOL = 1e-6


@dataclass
class RigidTransform:
    """Proper rigid motion: 3x3 rotation (det +1) plus mm translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation,
                                      dtype=np.float64).reshape(3)
        if not (np.isfinite(self.rotation).all()
                and np.isfinite(self.translation).all()):
            raise ValueError("transform contains non-finite values")
        err = np.linalg.norm(self.rotation.T @ self.rotation - np.eye(3))
        if err > _ORTHO_TOL:
            raise ValueError(f"rotation not orthonormal (|R'R - I| = {err:.3g})")
        if np.linalg.det(self.rotation) <= 0:
            raise ValueError("rotation is a reflection (det <= 0)")

    def to_json(self) -> dict:
        return {"r_quat": quat_from_matrix(self.rotation).tolist(),
                "t_mm": self.translation.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "RigidTransform":
        try:
            return cls(matrix_from_quat(obj["r_quat"]), obj["t_mm"])
        except KeyError as exc:
            raise ValueError(f"transform JSON missing key {exc}") from exc


def identity() -> RigidTransform:
    return RigidTransform(np.eye(3), np.zeros(3))


def rotation_about(axis, angle_rad: float,
                   translation=(0.0, 0.0, 0.0)) -> RigidTransform:
    """Rotation by angle about a unit axis (Rodrigues), optional translation."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        raise ValueError("rotation axis must be nonzero")
    x, y, z = axis / n
    K = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    R = np.eye(3) + np.sin(angle_rad) * K + (1 - np.cos(angle_rad)) * (K @ K)
    return RigidTransform(R, translation)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """a after b: apply(compose(a, b), p) == apply(a, apply(b, p))."""
    R = _orthonormalize(a.rotation @ b.rotation)
    t = a.rotation @ b.translation + a.translation
    return RigidTransform(R, t)


def invert(t: RigidTransform) -> RigidTransform:
    Rt = t.rotation.T
    return RigidTransform(Rt, -Rt @ t.translation)


def apply(t: RigidTransform, p) -> np.ndarray:
    """Transform a point (3,) or point array (n, 3), mm in, mm out."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 1:
        return t.rotation @ p + t.translation
    return p @ t.rotation.T + t.translation


def apply_direction(t: RigidTransform, d) -> np.ndarray:
    """Rotate a direction vector; translation does not apply."""
    return t.rotation @ np.asarray(d, dtype=np.float64)


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    # nearest rotation in Frobenius norm; keeps long compositions on SO(3)
    U, _, Vt = np.linalg.svd(R)
    out = U @ Vt
    if np.linalg.det(out) < 0:
        U[:, -1] = -U[:, -1]
        out = U @ Vt
    return out


# ---------------------------------------------------------------------------
# Quaternions ([w, x, y, z], unit norm)
# ---------------------------------------------------------------------------

def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    q /= np.linalg.norm(q)
    if q[0] < 0:  # canonical sign: non-negative scalar part
        q = -q
    return q


def matrix_from_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if n == 0:
        raise ValueError("zero quaternion")
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_slerp(a, b, u: float) -> np.ndarray:
    """Shortest-arc spherical interpolation, u in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dot = float(np.dot(a, b))
    if dot < 0:
        b, dot = -b, -dot
    if dot > 0.9995:  # nearly parallel, lerp avoids 0/0
        out = a + u * (b - a)
        return out / np.linalg.norm(out)
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    return (np.sin((1 - u) * theta) * a + np.sin(u * theta) * b) / np.sin(theta)


# ---------------------------------------------------------------------------
# Marker bodies
# ---------------------------------------------------------------------------

@dataclass
class MarkerGeometry:
    """Local coordinates of reflective marker centers on a tracked body."""

    name: str
    points_mm: np.ndarray

    def __post_init__(self):
        self.points_mm = np.asarray(self.points_mm, dtype=np.float64)
        if self.points_mm.ndim != 2 or self.points_mm.shape[1] != 3:
            raise ValueError("marker points must have shape (n, 3)")
        n = len(self.points_mm)
        if n < 3:
            raise ValueError(f"marker body '{self.name}' needs >= 3 points")
        for i in range(n):
            for j in range(i + 1, n):
                d = np.linalg.norm(self.points_mm[i] - self.points_mm[j])
                if d <= 1.0:
                    raise ValueError(
                        f"markers {i} and {j} of '{self.name}' are {d:.3g} mm "
                        f"apart; need > 1 mm")

    def is_coplanar(self, tol: float = 1e-6) -> bool:
        centered = self.points_mm - self.points_mm.mean(axis=0)
        s = np.linalg.svd(centered, compute_uv=False)
        return bool(s[2] <= tol * max(s[0], 1.0)) if len(s) >= 3 else True

    def to_json(self) -> dict:
        return {"name": self.name, "points_mm": self.points_mm.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "MarkerGeometry":
        try:
            return cls(obj["name"], obj["points_mm"])
        except KeyError as exc:
            raise ValueError(f"marker JSON missing key {exc}") from exc


@dataclass
class PivotResult:
    tip_offset_mm: np.ndarray
    rms_mm: float

    def __post_init__(self):
        self.tip_offset_mm = np.asarray(self.tip_offset_mm,
                                        dtype=np.float64).reshape(3)
        if self.rms_mm < 0:
            raise ValueError("rms cannot be negative")


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def fit_rigid(src, dst) -> tuple[RigidTransform, float]:
    """Least-squares rigid motion T minimizing sum |T(src_i) - dst_i|^2,
    via SVD of the cross-covariance with a reflection guard.  Returns the
    transform and the rms residual in mm."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(
            f"need matching (n, 3) point sets, got {src.shape} and {dst.shape}")
    if len(src) < 3:
        raise ValueError("need at least 3 point pairs")
    src_c = src - src.mean(axis=0)
    dst_c = dst - dst.mean(axis=0)
    s = np.linalg.svd(src_c, compute_uv=False)
    if s[1] <= 1e-9 * max(s[0], 1.0):
        raise ValueError("source points are collinear; rotation unconstrained")
    H = src_c.T @ dst_c
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = dst.mean(axis=0) - R @ src.mean(axis=0)
    fit = RigidTransform(R, t)
    residuals = apply(fit, src) - dst
    rms = float(np.sqrt(np.mean(np.sum(residuals ** 2, axis=1))))
    return fit, rms


def pivot_calibrate(poses) -> PivotResult:
    """Tool-tip offset from poses pivoting about a fixed world point.

    Each pose contributes R_i t_tip - p_world = -t_i; the stacked system
    is solved for (t_tip, p_world) by least squares.
    """
    poses = list(poses)
    if len(poses) < 10:
        raise ValueError(f"pivot calibration needs >= 10 poses, got {len(poses)}")
    A = np.zeros((3 * len(poses), 6))
    b = np.zeros(3 * len(poses))
    for i, pose in enumerate(poses):
        A[3 * i:3 * i + 3, :3] = pose.rotation
        A[3 * i:3 * i + 3, 3:] = -np.eye(3)
        b[3 * i:3 * i + 3] = -pose.translation
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] <= 1e-6 * sv[0]:
        raise ValueError(
            "poses lack orientation variety; pivot point unconstrained")
    solution, _, _, _ = np.linalg.lstsq(A, b, rcond=None)
    tip = solution[:3]
    residuals = (A @ solution - b).reshape(-1, 3)
    rms = float(np.sqrt(np.mean(np.sum(residuals ** 2, axis=1))))
    return PivotResult(tip, rms)


# ---------------------------------------------------------------------------
# Transform chains
# ---------------------------------------------------------------------------

def solve_image_to_world(image_to_arm: RigidTransform,
                         arm_to_sens: RigidTransform,
                         sens_to_world: RigidTransform) -> RigidTransform:
    """Chain the calibrated links: p_world = sens_to_world(arm_to_sens(
    image_to_arm(p_image)))."""
    return compose(sens_to_world, compose(arm_to_sens, image_to_arm))


def trajectory_to_world(traj: Trajectory,
                        image_to_world: RigidTransform) -> Trajectory:
    if traj.frame != "image":
        raise ValueError(
            f"expected an image-frame trajectory, got '{traj.frame}'")
    return Trajectory(traj.name, "world",
                      apply(image_to_world, traj.entry),
                      apply(image_to_world, traj.end))


def needle_to_world(tip_in_tool, axis_in_tool, tool_to_sens: RigidTransform,
                    sens_to_world: RigidTransform) -> tuple[np.ndarray, np.ndarray]:
    """Needle tip point and direction through the tool chain; the axis is
    rotated only and stays unit length."""
    axis = np.asarray(axis_in_tool, dtype=np.float64).reshape(3)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise ValueError("needle axis must be nonzero")
    axis = axis / n
    chain = compose(sens_to_world, tool_to_sens)
    return apply(chain, tip_in_tool), apply_direction(chain, axis)


def save_transform(t: RigidTransform, path) -> None:
    with open(path, "w") as fh:
        json.dump(t.to_json(), fh, indent=2)


def load_transform(path) -> RigidTransform:
    with open(path) as fh:
        return RigidTransform.from_json(json.load(fh))
