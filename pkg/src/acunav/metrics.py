"""Evaluation metrics: label overlap, chained system error, and insertion
accuracy against a reference trajectory."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .rigid import RigidTransform, apply, solve_image_to_world
from .volume import Mask3D
from .warp import Trajectory


@dataclass
class ErrorReport:
    """Per-landmark distance errors with population mean and std (mm)."""

    errors_mm: list
    mean_mm: float
    std_mm: float
    count: int

    def __post_init__(self):
        self.errors_mm = [float(e) for e in self.errors_mm]
        if self.count != len(self.errors_mm):
            raise ValueError("count does not match number of errors")
        if self.count == 0:
            raise ValueError("report needs at least one error value")
        arr = np.asarray(self.errors_mm)
        if abs(arr.mean() - self.mean_mm) > 1e-9:
            raise ValueError("mean inconsistent with listed errors")
        if abs(arr.std(ddof=0) - self.std_mm) > 1e-9:
            raise ValueError("std inconsistent with listed errors")

    @classmethod
    def from_errors(cls, errors) -> "ErrorReport":
        arr = np.asarray(list(errors), dtype=np.float64)
        if arr.size == 0:
            raise ValueError("report needs at least one error value")
        return cls(arr.tolist(), float(arr.mean()), float(arr.std(ddof=0)),
                   int(arr.size))

    def to_json(self) -> dict:
        return {"errors_mm": self.errors_mm, "mean_mm": self.mean_mm,
                "std_mm": self.std_mm, "count": self.count}

    @classmethod
    def from_json(cls, obj: dict) -> "ErrorReport":
        try:
            return cls(obj["errors_mm"], obj["mean_mm"], obj["std_mm"],
                       obj["count"])
        except KeyError as exc:
            raise ValueError(f"report JSON missing key {exc}") from exc

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["landmark_id", "error_mm"])
        for i, err in enumerate(self.errors_mm):
            writer.writerow([i, repr(err)])
        return buf.getvalue()


def dice(a: Mask3D, b: Mask3D, label: int) -> float:
    """Overlap coefficient 2|A n B| / (|A| + |B|) for one label.

    Both-empty selections count as perfect agreement (1.0)."""
    if a.dims != b.dims or a.spacing != b.spacing:
        raise ValueError(
            f"mask grids differ: {a.dims}@{a.spacing} vs {b.dims}@{b.spacing}")
    sel_a = a.data == label
    sel_b = b.data == label
    total = int(sel_a.sum()) + int(sel_b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(sel_a, sel_b).sum()) / total


def end_to_end_error(landmarks_image, tips_world,
                     image_to_arm: RigidTransform,
                     arm_to_sens: RigidTransform,
                     sens_to_world: RigidTransform) -> ErrorReport:
    """Distance between chain-mapped image landmarks and the corresponding
    measured tip positions in the world frame."""
    lc = np.asarray(landmarks_image, dtype=np.float64)
    tc = np.asarray(tips_world, dtype=np.float64)
    if lc.ndim != 2 or lc.shape[1] != 3 or lc.shape != tc.shape:
        raise ValueError(
            f"need matching (n, 3) point lists, got {lc.shape} and {tc.shape}")
    chain = solve_image_to_world(image_to_arm, arm_to_sens, sens_to_world)
    mapped = apply(chain, lc)
    return ErrorReport.from_errors(np.linalg.norm(mapped - tc, axis=1))


def insertion_errors(inserted: Trajectory, truth: Trajectory,
                     optimal_radius_mm: float = 1.5) -> tuple[float, float]:
    """Entry and endpoint error of an inserted needle path.

    Entry error is the plain distance between entry points.  Endpoint error
    is the distance to the truth endpoint minus the optimal-region radius,
    clamped at zero: anywhere inside the region counts as on-target."""
    if inserted.frame != "world" or truth.frame != "world":
        raise ValueError("insertion metrics are defined in the world frame")
    if optimal_radius_mm < 0:
        raise ValueError("radius cannot be negative")
    entry = float(np.linalg.norm(inserted.entry - truth.entry))
    end = float(np.linalg.norm(inserted.end - truth.end))
    return entry, max(0.0, end - optimal_radius_mm)
