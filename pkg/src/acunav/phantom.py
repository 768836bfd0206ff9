"""Procedural test phantoms: a desk-scale forearm stand-in with labeled
bone and muscle structures, corner fiducials, embedded template
trajectories, and an optional invertible analytic deformation that
produces a matched "second patient" volume with an exact point-mapping
oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import map_coordinates

from .registration import DeformationField, grid_mm
from .volume import Mask3D, Volume3D
from .warp import Trajectory

BONE_LABELS = (1, 2)
MUSCLE_LABELS = (3, 4)


@dataclass
class Cylinder:
    """Finite cylinder given by two axis endpoints (mm)."""

    start: np.ndarray
    end: np.ndarray
    radius: float
    intensity: float
    label: int

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=np.float64)
        self.end = np.asarray(self.end, dtype=np.float64)
        if self.radius <= 0:
            raise ValueError("cylinder radius must be positive")


@dataclass
class Ellipsoid:
    center: np.ndarray
    semi_axes: np.ndarray
    intensity: float
    label: int

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.semi_axes = np.asarray(self.semi_axes, dtype=np.float64)
        if (self.semi_axes <= 0).any():
            raise ValueError("ellipsoid semi-axes must be positive")


@dataclass
class GaussianBump:
    """Displacement u(x) = amplitude * exp(-|x - center|^2 / (2 sigma^2));
    the map x + u(x) stays invertible while |amplitude| e^-1/2 / sigma < 1."""

    center: np.ndarray
    amplitude_mm: np.ndarray
    sigma_mm: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.amplitude_mm = np.asarray(self.amplitude_mm, dtype=np.float64)
        if self.sigma_mm <= 0:
            raise ValueError("sigma must be positive")
        gain = np.linalg.norm(self.amplitude_mm) * np.exp(-0.5) / self.sigma_mm
        if gain >= 0.95:
            raise ValueError(
                f"bump too steep to invert (displacement gradient bound "
                f"{gain:.3f} >= 0.95)")

    def displacement(self, points: np.ndarray) -> np.ndarray:
        d2 = np.sum((points - self.center) ** 2, axis=-1, keepdims=True)
        return self.amplitude_mm * np.exp(-d2 / (2.0 * self.sigma_mm ** 2))

    def map_points(self, points) -> np.ndarray:
        """Exact forward map f(x) = x + u(x)."""
        points = np.asarray(points, dtype=np.float64)
        return points + self.displacement(points)

    def unmap_points(self, points, tol: float = 1e-10,
                     max_iter: int = 100) -> np.ndarray:
        """Exact inverse by fixed-point iteration x = y - u(x); converges
        because the displacement is a contraction."""
        y = np.asarray(points, dtype=np.float64)
        x = y.copy()
        for _ in range(max_iter):
            nxt = y - self.displacement(x)
            if np.abs(nxt - x).max() <= tol:
                return nxt
            x = nxt
        return x

    def forward_field(self, dims, spacing) -> DeformationField:
        """Forward map sampled at every voxel center."""
        grid = grid_mm(dims, spacing)
        return DeformationField(self.map_points(grid), spacing)

    def inverse_field(self, dims, spacing) -> DeformationField:
        grid = grid_mm(dims, spacing)
        return DeformationField(self.unmap_points(grid), spacing)


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    cylinders: list = dc_field(default_factory=list)
    ellipsoids: list = dc_field(default_factory=list)
    fiducials_mm: list = dc_field(default_factory=list)
    trajectories: list = dc_field(default_factory=list)
    deformation: GaussianBump | None = None
    noise_sigma: float = 0.0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        extent = (np.asarray(self.dims) - 1) * np.asarray(self.spacing)
        for cyl in self.cylinders:
            axis = cyl.end - cyl.start
            u = axis / np.linalg.norm(axis)
            pad = cyl.radius * np.sqrt(np.clip(1.0 - u ** 2, 0.0, 1.0))
            lo = np.minimum(cyl.start, cyl.end) - pad
            hi = np.maximum(cyl.start, cyl.end) + pad
            if (lo < 0).any() or (hi > extent).any():
                raise ValueError(
                    f"cylinder label {cyl.label} extends outside the grid")
        for ell in self.ellipsoids:
            lo = ell.center - ell.semi_axes
            hi = ell.center + ell.semi_axes
            if (lo < 0).any() or (hi > extent).any():
                raise ValueError(
                    f"ellipsoid label {ell.label} extends outside the grid")
        for f in self.fiducials_mm:
            f = np.asarray(f, dtype=np.float64)
            if (f < 0).any() or (f > extent).any():
                raise ValueError(f"fiducial {f.tolist()} outside the grid")


@dataclass
class Phantom:
    """Generated phantom: template volume/labels plus, when a deformation
    is specified, the analytically deformed counterpart."""

    volume: Volume3D
    labels: Mask3D
    trajectories: list
    fiducials_mm: np.ndarray
    deformation: GaussianBump | None = None
    deformed_volume: Volume3D | None = None
    deformed_labels: Mask3D | None = None


def _point_to_segment_distance(points, a, b):
    ab = b - a
    denom = float(ab @ ab)
    t = np.clip(((points - a) @ ab) / denom, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(points - closest, axis=-1)


def _paint(spec: PhantomSpec, grid: np.ndarray):
    intensity = np.zeros(spec.dims, dtype=np.float64)
    labels = np.zeros(spec.dims, dtype=np.uint8)
    # muscles first, bones after: bone replaces muscle where they overlap
    for ell in sorted(spec.ellipsoids, key=lambda e: e.label):
        inside = np.sum(((grid - ell.center) / ell.semi_axes) ** 2, axis=-1) <= 1.0
        intensity[inside] = ell.intensity
        labels[inside] = ell.label
    for cyl in sorted(spec.cylinders, key=lambda c: c.label):
        inside = _point_to_segment_distance(grid, cyl.start, cyl.end) <= cyl.radius
        intensity[inside] = cyl.intensity
        labels[inside] = cyl.label
    for f in spec.fiducials_mm:
        idx = tuple(int(round(c / s)) for c, s in zip(np.asarray(f, dtype=float),
                                                      spec.spacing))
        idx = tuple(min(max(i, 0), d - 1) for i, d in zip(idx, spec.dims))
        intensity[idx] = 1.0
    return intensity, labels


def _resample_through(inv_field: DeformationField, data: np.ndarray,
                      spacing, order: int) -> np.ndarray:
    coords = [inv_field.field[..., d] / spacing[d] for d in range(3)]
    return map_coordinates(data, coords, order=order, mode="nearest")


def gen_phantom(spec: PhantomSpec, seed: int) -> Phantom:
    """Rasterize a phantom; deterministic for a given spec and seed."""
    rng = np.random.default_rng(seed)
    grid = grid_mm(spec.dims, spec.spacing)
    intensity, labels = _paint(spec, grid)
    if spec.noise_sigma > 0:
        intensity = intensity + spec.noise_sigma * rng.standard_normal(spec.dims)
    intensity = np.clip(intensity, 0.0, 1.0)

    volume = Volume3D(spec.dims, spec.spacing, intensity.astype(np.float32))
    mask = Mask3D(spec.dims, spec.spacing, labels)
    phantom = Phantom(
        volume=volume, labels=mask,
        trajectories=list(spec.trajectories),
        fiducials_mm=np.asarray(spec.fiducials_mm, dtype=np.float64).reshape(-1, 3),
        deformation=spec.deformation)

    if spec.deformation is not None:
        inv = spec.deformation.inverse_field(spec.dims, spec.spacing)
        warped_int = _resample_through(inv, intensity, spec.spacing, order=1)
        if spec.noise_sigma > 0:
            warped_int = warped_int + spec.noise_sigma * rng.standard_normal(spec.dims)
        warped_int = np.clip(warped_int, 0.0, 1.0)
        warped_lab = _resample_through(inv, labels, spec.spacing, order=0)
        phantom.deformed_volume = Volume3D(spec.dims, spec.spacing,
                                           warped_int.astype(np.float32))
        phantom.deformed_labels = Mask3D(spec.dims, spec.spacing,
                                         warped_lab.astype(np.uint8))
    return phantom


def default_arm_spec(deformed: bool = False) -> PhantomSpec:
    """Forearm stand-in on a 48 x 48 x 24 mm grid: two bone shafts, two
    muscle bodies, four end-slice corner fiducials, three template
    trajectories ending at muscle-level depths."""
    dims = (48, 48, 24)
    spacing = (1.0, 1.0, 1.0)
    cylinders = [
        Cylinder((16.0, 24.0, 2.0), (16.0, 24.0, 22.0), 4.0, 1.0, 1),
        Cylinder((32.0, 24.0, 2.0), (32.0, 24.0, 22.0), 3.5, 0.95, 2),
    ]
    ellipsoids = [
        Ellipsoid((24.0, 16.0, 12.0), (14.0, 7.0, 9.0), 0.60, 3),
        Ellipsoid((24.0, 33.0, 12.0), (12.0, 6.0, 8.0), 0.55, 4),
    ]
    fiducials = [(4.0, 4.0, 23.0), (44.0, 4.0, 23.0),
                 (4.0, 44.0, 23.0), (44.0, 44.0, 23.0)]
    trajectories = [
        Trajectory("traj-1", "image", (10.0, 6.0, 12.0), (20.0, 15.0, 12.0)),
        Trajectory("traj-2", "image", (38.0, 6.0, 10.0), (28.0, 14.0, 12.0)),
        Trajectory("traj-3", "image", (24.0, 42.0, 14.0), (24.0, 34.0, 12.0)),
    ]
    deformation = None
    if deformed:
        deformation = GaussianBump(center=(24.0, 20.0, 12.0),
                                   amplitude_mm=(2.0, 1.2, 0.0),
                                   sigma_mm=12.0)
    return PhantomSpec(dims, spacing, cylinders, ellipsoids, fiducials,
                       trajectories, deformation)


def sphere_pair(n: int = 32, radius: float = 7.0, shift=(3.0, 0.0, 0.0),
                edge_width: float = 1.2):
    """Template/target pair for convergence checks: a soft-edged sphere and
    the same sphere translated, with binary label masks.

    Returns (template, target, template_mask, target_mask).
    """
    dims = (n, n, n)
    spacing = (1.0, 1.0, 1.0)
    grid = grid_mm(dims, spacing)
    center = np.array([(n - 1) / 2.0] * 3)
    shift = np.asarray(shift, dtype=np.float64)

    def sphere(c):
        r = np.linalg.norm(grid - c, axis=-1)
        vol = 1.0 / (1.0 + np.exp((r - radius) / edge_width))
        mask = (r <= radius).astype(np.uint8)
        return (Volume3D(dims, spacing, vol.astype(np.float32)),
                Mask3D(dims, spacing, mask))

    template, template_mask = sphere(center)
    target, target_mask = sphere(center + shift)
    return template, target, template_mask, target_mask


def default_chain():
    """Fixed synthetic calibration links (image->arm, arm->sensor,
    sensor->world) for pipeline runs without real hardware.  The values are
    arbitrary but non-trivial rotations and offsets."""
    from .rigid import RigidTransform, rotation_about

    image_to_arm = RigidTransform(
        rotation_about((0.0, 0.0, 1.0), 0.20).rotation, (12.0, -8.0, 4.0))
    arm_to_sens = RigidTransform(
        rotation_about((1.0, 1.0, 0.0), -0.40).rotation, (80.0, 20.0, 150.0))
    sens_to_world = RigidTransform(
        rotation_about((0.0, 1.0, 0.0), 0.90).rotation, (-40.0, 60.0, 220.0))
    return image_to_arm, arm_to_sens, sens_to_world
