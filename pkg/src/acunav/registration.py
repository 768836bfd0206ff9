"""Non-rigid registration via time-dependent velocity fields.

A template volume flows onto a target along a velocity field v(t, x)
minimized over

    E(v) = integral of |v(t)|_L^2 dt  +  w * MSE(I(1), target)

where I evolves by the transport rule I(t+dt) = I(t) - <grad I, v> dt and
L is a Helmholtz-type smoothing operator.  The gradient is the exact
adjoint of the discrete transport recursion, so it matches finite
differences of the discrete loss to rounding error.
"""

from __future__ import annotations

import functools
import json
import os
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import map_coordinates

from .volume import Volume3D, save_vector_field, save_volume, load_vector_field


class RegistrationError(RuntimeError):
    """Optimization failure; carries the iteration the problem appeared at."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


@dataclass
class VelocityField:
    """Per-timestep velocity grids, shape (T, nx, ny, nz, 3), mm per unit time."""

    field: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        self.field = np.asarray(self.field, dtype=np.float64)
        if self.field.ndim != 5 or self.field.shape[4] != 3:
            raise ValueError(
                f"velocity needs shape (T, nx, ny, nz, 3), got {self.field.shape}")
        if self.field.shape[0] < 1:
            raise ValueError("velocity needs at least one timestep")
        if not np.isfinite(self.field).all():
            raise ValueError("velocity contains non-finite values")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def timesteps(self) -> int:
        return self.field.shape[0]


@dataclass
class DeformationField:
    """Map from voxel centers to deformed positions in mm, shape (nx, ny, nz, 3)."""

    field: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        self.field = np.asarray(self.field, dtype=np.float64)
        if self.field.ndim != 4 or self.field.shape[3] != 3:
            raise ValueError(
                f"deformation needs shape (nx, ny, nz, 3), got {self.field.shape}")
        if not np.isfinite(self.field).all():
            raise ValueError("deformation contains non-finite values")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.field.shape[:3]


@dataclass
class RegistrationConfig:
    timesteps: int = 10
    max_iterations: int = 100
    step_size: float = 1.0
    alpha: float = 1.0
    gamma: float = 0.1
    kernel_passes: int = 2
    similarity_weight: float = 1.0
    tolerance: float = 1e-8

    def __post_init__(self):
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        for name in ("max_iterations", "step_size", "alpha", "gamma",
                     "kernel_passes", "similarity_weight", "tolerance"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_json(self) -> dict:
        return {
            "timesteps": self.timesteps,
            "max_iterations": self.max_iterations,
            "step_size": self.step_size,
            "alpha": self.alpha,
            "gamma": self.gamma,
            "kernel_passes": self.kernel_passes,
            "similarity_weight": self.similarity_weight,
            "tolerance": self.tolerance,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RegistrationConfig":
        known = {k: obj[k] for k in cls().to_json() if k in obj}
        unknown = set(obj) - set(cls().to_json())
        if unknown:
            raise ValueError(f"unknown registration config keys: {sorted(unknown)}")
        return cls(**known)


@dataclass
class RegistrationResult:
    velocity: VelocityField
    forward: DeformationField
    backward: DeformationField
    warped: Volume3D
    initial_terms: tuple[float, float]       # (reg, sim) at v = 0
    loss_history: list = dc_field(default_factory=list)  # (reg, sim) per accepted step
    converged: bool = False

    @property
    def final_terms(self) -> tuple[float, float]:
        return self.loss_history[-1] if self.loss_history else self.initial_terms


# ---------------------------------------------------------------------------
# Differential stencils and their exact adjoints
# ---------------------------------------------------------------------------

def _axis_gradient(a: np.ndarray, h: float, axis: int) -> np.ndarray:
    return np.gradient(a, h, axis=axis, edge_order=1)


def _axis_gradient_adjoint(y: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Transpose of the central-interior / one-sided-border gradient stencil."""
    y = np.moveaxis(y, axis, 0)
    n = y.shape[0]
    out = np.zeros_like(y)
    if n == 2:
        s = (y[0] + y[1]) / h
        out[0] = -s
        out[1] = s
    else:
        out[0] += -y[0] / h
        out[1] += y[0] / h
        out[n - 2] += -y[n - 1] / h
        out[n - 1] += y[n - 1] / h
        out[0:n - 2] -= y[1:n - 1] / (2.0 * h)
        out[2:n] += y[1:n - 1] / (2.0 * h)
    return np.moveaxis(out, 0, axis)


# ---------------------------------------------------------------------------
# Smoothing operator
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=16)
def _laplacian_symbol(shape: tuple) -> np.ndarray:
    """Frequency response of the negated 6-neighbor periodic Laplacian,
    unit grid step, laid out for rfftn."""
    lam = np.zeros([n for n in shape[:-1]] + [shape[-1] // 2 + 1])
    for axis, n in enumerate(shape):
        freq = (np.fft.rfftfreq(n) if axis == len(shape) - 1
                else np.fft.fftfreq(n))
        term = 2.0 - 2.0 * np.cos(2.0 * np.pi * freq)
        reshape = [1] * lam.ndim
        reshape[axis] = -1
        lam = lam + term.reshape(reshape)
    return lam


def _apply_symbol(a: np.ndarray, symbol: np.ndarray) -> np.ndarray:
    axes = tuple(range(a.ndim))
    return np.fft.irfftn(np.fft.rfftn(a, axes=axes) * symbol, s=a.shape, axes=axes)


def smooth_field(field: np.ndarray, alpha: float, gamma: float,
                 passes: int = 1) -> np.ndarray:
    """Low-pass each vector component with the unit-gain Helmholtz kernel
    (gamma / (gamma + alpha * lap_hat))**passes.

    Constants pass through unchanged; every frequency gain is <= 1, so
    per-component energy never grows.  The stencil works in grid units.
    """
    if alpha <= 0 or gamma <= 0:
        raise ValueError("alpha and gamma must be positive")
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 4 or field.shape[3] != 3:
        raise ValueError("expected a (nx, ny, nz, 3) vector grid")
    lam = _laplacian_symbol(field.shape[:3])
    kernel = (gamma / (gamma + alpha * lam)) ** passes
    out = np.empty_like(field)
    for c in range(3):
        out[..., c] = _apply_symbol(field[..., c], kernel)
    return out


def _penalty_symbol(shape, config: RegistrationConfig) -> np.ndarray:
    lam = _laplacian_symbol(shape)
    return ((config.gamma + config.alpha * lam) / config.gamma) ** config.kernel_passes


# ---------------------------------------------------------------------------
# Transport
# ---------------------------------------------------------------------------

def transport_step(image: Volume3D, v_t: np.ndarray, dt: float) -> Volume3D:
    """One explicit advection step: I - <grad I, v> * dt.

    Image content moves along +v; gradients are central in the interior,
    one-sided at the borders.
    """
    v_t = np.asarray(v_t, dtype=np.float64)
    if v_t.shape != image.dims + (3,):
        raise ValueError(
            f"velocity grid {v_t.shape} does not match image dims {image.dims}")
    data = image.data.astype(np.float64)
    out = data - dt * _advection_term(data, v_t, image.spacing)
    return Volume3D(image.dims, image.spacing, out.astype(np.float32))


def _advection_term(data: np.ndarray, v_t: np.ndarray, spacing) -> np.ndarray:
    g = np.gradient(data, *spacing, edge_order=1)
    return sum(g[d] * v_t[..., d] for d in range(3))


def _transport_sequence(i0: np.ndarray, vel: np.ndarray, dt: float,
                        spacing) -> list:
    images = [i0]
    for k in range(vel.shape[0]):
        cur = images[-1]
        images.append(cur - dt * _advection_term(cur, vel[k], spacing))
    return images


# ---------------------------------------------------------------------------
# Loss and exact gradient
# ---------------------------------------------------------------------------

def _normalize01(data: np.ndarray) -> np.ndarray:
    data = data.astype(np.float64)
    lo, hi = float(data.min()), float(data.max())
    if lo >= 0.0 and hi <= 1.0:
        return data
    if hi == lo:
        return np.zeros_like(data)
    return (data - lo) / (hi - lo)


def _prep(template: Volume3D, target: Volume3D):
    if template.dims != target.dims or template.spacing != target.spacing:
        raise ValueError(
            f"template grid {template.dims}/{template.spacing} does not match "
            f"target {target.dims}/{target.spacing}")
    return _normalize01(template.data), _normalize01(target.data)


def _loss_terms(vel: np.ndarray, i0: np.ndarray, i_f: np.ndarray,
                spacing, config: RegistrationConfig):
    dt = 1.0 / vel.shape[0]
    n = i0.size
    symbol = _penalty_symbol(i0.shape, config)
    reg = 0.0
    for k in range(vel.shape[0]):
        for c in range(3):
            comp = vel[k, ..., c]
            reg += dt * float(np.vdot(comp, _apply_symbol(comp, symbol))) / n
    i_final = _transport_sequence(i0, vel, dt, spacing)[-1]
    sim = config.similarity_weight * float(np.mean((i_final - i_f) ** 2))
    return reg, sim, i_final


def registration_loss(vel: VelocityField, template: Volume3D, target: Volume3D,
                      config: RegistrationConfig) -> tuple[float, float]:
    """(regularizer, similarity) terms of the objective at this velocity."""
    i0, i_f = _prep(template, target)
    reg, sim, _ = _loss_terms(vel.field, i0, i_f, template.spacing, config)
    return reg, sim


def registration_gradient(vel: VelocityField, template: Volume3D,
                          target: Volume3D,
                          config: RegistrationConfig) -> np.ndarray:
    """Exact gradient of the discrete objective with respect to every
    velocity sample, shape (T, nx, ny, nz, 3)."""
    i0, i_f = _prep(template, target)
    return _gradient(vel.field, i0, i_f, template.spacing, config)


def _gradient(vel: np.ndarray, i0: np.ndarray, i_f: np.ndarray, spacing,
              config: RegistrationConfig) -> np.ndarray:
    T = vel.shape[0]
    dt = 1.0 / T
    n = i0.size
    images = _transport_sequence(i0, vel, dt, spacing)
    symbol = _penalty_symbol(i0.shape, config)
    grad = np.zeros_like(vel)
    lam = (2.0 * config.similarity_weight / n) * (images[T] - i_f)
    for k in range(T - 1, -1, -1):
        g = np.gradient(images[k], *spacing, edge_order=1)
        for d in range(3):
            grad[k, ..., d] = -dt * g[d] * lam
        adj = sum(
            _axis_gradient_adjoint(vel[k, ..., d] * lam, spacing[d], axis=d)
            for d in range(3))
        lam = lam - dt * adj
        for c in range(3):
            grad[k, ..., c] += (2.0 * dt / n) * _apply_symbol(vel[k, ..., c], symbol)
    return grad


# ---------------------------------------------------------------------------
# Flow integration
# ---------------------------------------------------------------------------

def grid_mm(dims, spacing) -> np.ndarray:
    axes = [np.arange(n, dtype=np.float64) * s for n, s in zip(dims, spacing)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return grid


def identity_deformation(dims, spacing) -> DeformationField:
    return DeformationField(grid_mm(dims, spacing), spacing)


def _sample_field(field: np.ndarray, points_mm: np.ndarray,
                  spacing) -> np.ndarray:
    """Trilinear sample of an (..., C) grid field at mm positions; border
    values extend outward (clamped)."""
    coords = [points_mm[..., d] / spacing[d] for d in range(3)]
    out = np.empty(points_mm.shape[:-1] + (field.shape[-1],))
    for c in range(field.shape[-1]):
        out[..., c] = map_coordinates(field[..., c], coords, order=1,
                                      mode="nearest")
    return out


def integrate_deformation(vel: VelocityField) -> DeformationField:
    """Forward flow: follow v from t=0 to t=1 starting at every voxel
    center.  Zero velocity yields the identity map exactly."""
    T = vel.timesteps
    dt = 1.0 / T
    phi = grid_mm(vel.field.shape[1:4], vel.spacing)
    for k in range(T):
        phi = phi + dt * _sample_field(vel.field[k], phi, vel.spacing)
    return DeformationField(phi, vel.spacing)


def integrate_deformation_inverse(vel: VelocityField) -> DeformationField:
    """Inverse of the forward flow, built by stepping each grid point
    against the velocity and resampling the running map."""
    T = vel.timesteps
    dt = 1.0 / T
    dims = vel.field.shape[1:4]
    grid = grid_mm(dims, vel.spacing)
    psi = grid.copy()
    for k in range(T):
        back = grid - dt * vel.field[k]
        psi = _sample_field(psi, back, vel.spacing)
    return DeformationField(psi, vel.spacing)


def jacobian_determinant(phi: DeformationField) -> Volume3D:
    """Per-voxel determinant of the deformation Jacobian; 1 everywhere for
    the identity map, > 0 certifies no folding."""
    J = np.empty(phi.dims + (3, 3))
    for i in range(3):
        g = np.gradient(phi.field[..., i], *phi.spacing, edge_order=1)
        for j in range(3):
            J[..., i, j] = g[j]
    det = (J[..., 0, 0] * (J[..., 1, 1] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 1])
           - J[..., 0, 1] * (J[..., 1, 0] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 0])
           + J[..., 0, 2] * (J[..., 1, 0] * J[..., 2, 1] - J[..., 1, 1] * J[..., 2, 0]))
    return Volume3D(phi.dims, phi.spacing, det.astype(np.float32))


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

_MAX_HALVINGS = 20


def register(template: Volume3D, target: Volume3D,
             config: RegistrationConfig | None = None,
             progress=None, cancel=None) -> RegistrationResult:
    """Gradient descent with backtracking line search on the transport
    objective.  Deterministic: identical inputs give identical results.

    progress, if given, is called as progress(iteration, total_loss);
    cancel, if given, is polled each iteration and stops the run early
    when it returns true.
    """
    config = config or RegistrationConfig()
    i0, i_f = _prep(template, target)
    spacing = template.spacing
    T = config.timesteps
    vel = np.zeros((T,) + template.dims + (3,))

    reg0, sim0, _ = _loss_terms(vel, i0, i_f, spacing, config)
    total = reg0 + sim0
    history = []
    converged = False

    for it in range(config.max_iterations):
        if cancel is not None and cancel():
            break
        grad = _gradient(vel, i0, i_f, spacing, config)
        direction = np.empty_like(grad)
        for k in range(T):
            direction[k] = -smooth_field(grad[k], config.alpha, config.gamma,
                                         config.kernel_passes)
        _clamp_shell(direction)

        step = config.step_size
        accepted = False
        for _ in range(_MAX_HALVINGS):
            trial = vel + step * direction
            with np.errstate(over="ignore", invalid="ignore"):
                reg, sim, _ = _loss_terms(trial, i0, i_f, spacing, config)
            trial_total = reg + sim
            if np.isfinite(trial_total) and trial_total < total:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # a step this small still overflowing the transport is divergence,
            # not convergence
            if not np.isfinite(trial_total):
                raise RegistrationError(
                    f"loss diverged (non-finite) at iteration {it}", iteration=it)
            converged = True
            break

        decrease = total - trial_total
        vel, total = trial, trial_total
        history.append((reg, sim))
        if progress is not None:
            progress(it, total)
        if decrease <= config.tolerance:
            converged = True
            break

    vfield = VelocityField(vel, spacing)
    forward = integrate_deformation(vfield)
    backward = integrate_deformation_inverse(vfield)
    final = _transport_sequence(i0, vel, 1.0 / T, spacing)[-1]
    warped = Volume3D(template.dims, spacing, final.astype(np.float32))
    return RegistrationResult(
        velocity=vfield, forward=forward, backward=backward, warped=warped,
        initial_terms=(reg0, sim0), loss_history=history, converged=converged)


def _clamp_shell(direction: np.ndarray) -> None:
    # outermost voxel shell carries no flow, so nothing escapes the domain
    for axis in range(1, 4):
        idx = [slice(None)] * direction.ndim
        idx[axis] = 0
        direction[tuple(idx)] = 0.0
        idx[axis] = direction.shape[axis] - 1
        direction[tuple(idx)] = 0.0


# ---------------------------------------------------------------------------
# On-disk form
# ---------------------------------------------------------------------------

def save_result(result: RegistrationResult, out_dir) -> None:
    """Lay a result out as AVF fields plus JSON loss history."""
    os.makedirs(out_dir, exist_ok=True)
    spacing = result.forward.spacing
    save_vector_field(result.forward.field.astype(np.float32), spacing,
                      os.path.join(out_dir, "deformation.avf"))
    save_vector_field(result.backward.field.astype(np.float32), spacing,
                      os.path.join(out_dir, "deformation_inverse.avf"))
    for k in range(result.velocity.timesteps):
        save_vector_field(result.velocity.field[k].astype(np.float32), spacing,
                          os.path.join(out_dir, f"velocity_{k:03d}.avf"))
    save_volume(result.warped, os.path.join(out_dir, "warped.avf"))
    entries = [{"iter": 0,
                "reg_term": result.initial_terms[0],
                "sim_term": result.initial_terms[1]}]
    entries += [{"iter": i + 1, "reg_term": r, "sim_term": s}
                for i, (r, s) in enumerate(result.loss_history)]
    with open(os.path.join(out_dir, "loss.json"), "w") as fh:
        json.dump({"converged": result.converged, "loss": entries}, fh, indent=2)


def load_deformation(path) -> DeformationField:
    arr, spacing = load_vector_field(path)
    return DeformationField(arr.astype(np.float64), spacing)
