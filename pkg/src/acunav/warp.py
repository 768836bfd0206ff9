"""Apply deformation fields to points, label masks, and needle trajectories."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .registration import DeformationField
from .volume import Mask3D

FRAMES = ("image", "arm", "world")


@dataclass
class Trajectory:
    """Straight needle path between an entry point and an end point (mm)."""

    name: str
    frame: str
    entry: np.ndarray
    end: np.ndarray

    def __post_init__(self):
        if self.frame not in FRAMES:
            raise ValueError(f"frame must be one of {FRAMES}, got '{self.frame}'")
        self.entry = np.asarray(self.entry, dtype=np.float64).reshape(3)
        self.end = np.asarray(self.end, dtype=np.float64).reshape(3)
        if not (np.isfinite(self.entry).all() and np.isfinite(self.end).all()):
            raise ValueError(f"trajectory '{self.name}' has non-finite endpoints")
        if np.array_equal(self.entry, self.end):
            raise ValueError(f"trajectory '{self.name}' has zero length")

    @property
    def direction(self) -> np.ndarray:
        d = self.end - self.entry
        return d / np.linalg.norm(d)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.entry))

    def to_json(self) -> dict:
        return {"name": self.name, "frame": self.frame,
                "entry_mm": self.entry.tolist(), "end_mm": self.end.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Trajectory":
        try:
            return cls(obj["name"], obj["frame"], obj["entry_mm"], obj["end_mm"])
        except KeyError as exc:
            raise ValueError(f"trajectory JSON missing key {exc}") from exc


def save_trajectories(trajectories, path) -> None:
    with open(path, "w") as fh:
        json.dump([t.to_json() for t in trajectories], fh, indent=2)


def load_trajectories(path) -> list:
    with open(path) as fh:
        arr = json.load(fh)
    if not isinstance(arr, list):
        raise ValueError(f"{path}: expected a JSON array of trajectories")
    return [Trajectory.from_json(obj) for obj in arr]


def _check_bounds(phi: DeformationField, p: np.ndarray, what: str) -> None:
    hi = (np.asarray(phi.dims) - 1) * np.asarray(phi.spacing)
    if (p < -1e-9).any() or (p > hi + 1e-9).any():
        raise ValueError(
            f"{what} {p.tolist()} outside deformation grid [0, {hi.tolist()}] mm")


def warp_point(phi: DeformationField, p) -> np.ndarray:
    """Trilinear interpolation of the deformation map at an mm position.
    Points outside the grid are an error, never clamped."""
    p = np.asarray(p, dtype=np.float64).reshape(3)
    _check_bounds(phi, p, "point")
    coords = [np.array([p[d] / phi.spacing[d]]) for d in range(3)]
    out = np.empty(3)
    for c in range(3):
        out[c] = map_coordinates(phi.field[..., c], coords, order=1,
                                 mode="nearest")[0]
    return out


def warp_mask(phi: DeformationField, mask: Mask3D) -> Mask3D:
    """Resample a label map through the given deformation: each output
    voxel takes the label found at phi(x), nearest-neighbor, so no new
    labels can appear.  Pass the inverse map to push labels forward."""
    if mask.dims != phi.dims:
        raise ValueError(
            f"mask dims {mask.dims} do not match deformation grid {phi.dims}")
    coords = [phi.field[..., d] / phi.spacing[d] for d in range(3)]
    data = map_coordinates(mask.data, coords, order=0, mode="nearest")
    return Mask3D(mask.dims, mask.spacing, data, num_labels=mask.num_labels)


def transfer_trajectory(phi: DeformationField, traj: Trajectory) -> Trajectory:
    """Map an image-frame trajectory through the deformation endpoint-wise."""
    if traj.frame != "image":
        raise ValueError(
            f"can only transfer image-frame trajectories, got '{traj.frame}'")
    entry = warp_point(phi, traj.entry)
    end = warp_point(phi, traj.end)
    if np.allclose(entry, end):
        raise ValueError(
            f"deformation collapses trajectory '{traj.name}' to a point")
    return Trajectory(traj.name, "image", entry, end)
