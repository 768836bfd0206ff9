"""3D volume types, AVF file I/O, and scan preprocessing.

Volumes are scalar grids with per-axis spacing in mm.  Array index order is
(x, y, z); the AVF on-disk body is x-fastest, so arrays are flattened in
Fortran order when written.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

AVF_MAGIC = "AVF 1"
_DTYPE_TAGS = {"f32": np.float32, "u8": np.uint8, "f32x3": np.float32}


def _check_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise ValueError(f"dims must be 3 positive integers, got {dims}")
    return dims


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise ValueError(f"spacing must be 3 positive reals, got {spacing}")
    return spacing


@dataclass
class Volume3D:
    """Scalar 3D image; ``data`` has shape ``dims`` and dtype float32."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray

    def __post_init__(self):
        self.dims = _check_dims(self.dims)
        self.spacing = _check_spacing(self.spacing)
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.shape != self.dims:
            raise ValueError(
                f"data shape {self.data.shape} does not match dims {self.dims}")
        if not np.isfinite(self.data).all():
            raise ValueError("volume data contains non-finite values")

    @property
    def extent_mm(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=float) * np.asarray(self.spacing)


@dataclass
class Mask3D:
    """Label map on the same grid as its parent volume (uint8 labels)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray
    num_labels: int = 0  # 0 means "infer from data"

    def __post_init__(self):
        self.dims = _check_dims(self.dims)
        self.spacing = _check_spacing(self.spacing)
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.data.shape != self.dims:
            raise ValueError(
                f"mask shape {self.data.shape} does not match dims {self.dims}")
        if self.num_labels <= 0:
            self.num_labels = int(self.data.max(initial=0))
        elif int(self.data.max(initial=0)) > self.num_labels:
            raise ValueError(
                f"mask holds label {int(self.data.max())} above declared "
                f"count {self.num_labels}")

    def binary(self, label: int) -> np.ndarray:
        return self.data == label


@dataclass
class SliceOffsets:
    """Per-slice in-plane translation (mm), one (dx, dy) row per z slice."""

    offsets_mm: np.ndarray

    def __post_init__(self):
        self.offsets_mm = np.asarray(self.offsets_mm, dtype=np.float64)
        if self.offsets_mm.ndim != 2 or self.offsets_mm.shape[1] != 2:
            raise ValueError("offsets must have shape (n_slices, 2)")
        if not np.isfinite(self.offsets_mm).all():
            raise ValueError("offsets contain non-finite values")


# ---------------------------------------------------------------------------
# AVF file format
# ---------------------------------------------------------------------------

def _write_avf(path, dims, spacing, dtype_tag: str, body: bytes) -> None:
    header = (
        f"{AVF_MAGIC}\n"
        f"dims {dims[0]} {dims[1]} {dims[2]}\n"
        f"spacing {spacing[0]!r} {spacing[1]!r} {spacing[2]!r}\n"
        f"dtype {dtype_tag}\n"
        f"end\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(body)


def _read_avf(path) -> tuple[tuple, tuple, str, bytes]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such volume file: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    # Header is a short run of UTF-8 lines terminated by "end\n".
    end_marker = b"end\n"
    idx = raw.find(end_marker)
    if idx < 0:
        raise ValueError(f"{path}: malformed AVF header (missing 'end')")
    header = raw[:idx].decode("utf-8", errors="replace").splitlines()
    body = raw[idx + len(end_marker):]
    if not header or header[0].strip() != AVF_MAGIC:
        raise ValueError(f"{path}: not an AVF file (bad magic)")
    fields = {}
    for line in header[1:]:
        parts = line.split()
        if not parts:
            continue
        fields[parts[0]] = parts[1:]
    try:
        dims = _check_dims(fields["dims"])
        spacing = _check_spacing(fields["spacing"])
        dtype_tag = fields["dtype"][0]
    except (KeyError, IndexError, ValueError) as exc:
        raise ValueError(f"{path}: malformed AVF header ({exc})") from exc
    if dtype_tag not in _DTYPE_TAGS:
        raise ValueError(f"{path}: unknown dtype tag '{dtype_tag}'")
    return dims, spacing, dtype_tag, body


def _expect_body(path, body: bytes, expected: int) -> None:
    if len(body) != expected:
        raise ValueError(
            f"{path}: body length {len(body)} does not match header "
            f"(expected {expected} bytes)")


def save_volume(vol: Volume3D, path) -> None:
    """Write a Volume3D as AVF f32.  Round-trips bit-exactly."""
    if not np.isfinite(vol.data).all():
        raise ValueError("refusing to write non-finite volume data")
    body = np.asarray(vol.data, dtype="<f4").flatten(order="F").tobytes()
    _write_avf(path, vol.dims, vol.spacing, "f32", body)


def load_volume(path) -> Volume3D:
    dims, spacing, tag, body = _read_avf(path)
    if tag != "f32":
        raise ValueError(f"{path}: expected dtype f32, found {tag}")
    n = dims[0] * dims[1] * dims[2]
    _expect_body(path, body, 4 * n)
    data = np.frombuffer(body, dtype="<f4").reshape(dims, order="F")
    return Volume3D(dims, spacing, data.copy())


def save_mask(mask: Mask3D, path) -> None:
    body = np.asarray(mask.data, dtype=np.uint8).flatten(order="F").tobytes()
    _write_avf(path, mask.dims, mask.spacing, "u8", body)


def load_mask(path) -> Mask3D:
    dims, spacing, tag, body = _read_avf(path)
    if tag != "u8":
        raise ValueError(f"{path}: expected dtype u8, found {tag}")
    n = dims[0] * dims[1] * dims[2]
    _expect_body(path, body, n)
    data = np.frombuffer(body, dtype=np.uint8).reshape(dims, order="F")
    return Mask3D(dims, spacing, data.copy())


def save_vector_field(field_xyz: np.ndarray, spacing, path) -> None:
    """Write an (nx, ny, nz, 3) field as AVF f32x3 (per-voxel xyz triples)."""
    arr = np.asarray(field_xyz, dtype="<f4")
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ValueError("vector field must have shape (nx, ny, nz, 3)")
    if not np.isfinite(arr).all():
        raise ValueError("refusing to write non-finite vector field")
    body = arr.transpose(2, 1, 0, 3).tobytes()  # z, y, x outer -> x-fastest
    _write_avf(path, arr.shape[:3], spacing, "f32x3", body)


def load_vector_field(path) -> tuple[np.ndarray, tuple]:
    dims, spacing, tag, body = _read_avf(path)
    if tag != "f32x3":
        raise ValueError(f"{path}: expected dtype f32x3, found {tag}")
    n = dims[0] * dims[1] * dims[2]
    _expect_body(path, body, 12 * n)
    arr = np.frombuffer(body, dtype="<f4").reshape(dims[2], dims[1], dims[0], 3)
    return arr.transpose(2, 1, 0, 3).copy(), spacing


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def downsample(vol: Volume3D, factors) -> Volume3D:
    """Block-mean downsample; pads by edge replication when a factor does
    not divide its dim.  Spacing scales by the factors."""
    factors = tuple(int(f) for f in factors)
    if len(factors) != 3 or any(f <= 0 for f in factors):
        raise ValueError(f"factors must be 3 positive integers, got {factors}")
    data = vol.data
    pad = [(-d) % f for d, f in zip(vol.dims, factors)]
    if any(pad):
        data = np.pad(data, [(0, p) for p in pad], mode="edge")
    nd = tuple(s // f for s, f in zip(data.shape, factors))
    blocks = data.reshape(nd[0], factors[0], nd[1], factors[1], nd[2], factors[2])
    out = blocks.mean(axis=(1, 3, 5), dtype=np.float64).astype(np.float32)
    spacing = tuple(s * f for s, f in zip(vol.spacing, factors))
    return Volume3D(nd, spacing, out)


_CONN6 = ndimage.generate_binary_structure(3, 1)


def extract_roi(vol: Volume3D, threshold: float, seed=None) -> Mask3D:
    """Region of interest: the 6-connected component of voxels >= threshold
    that contains the seed (defaults to the volume center).  Disconnected
    bright artifacts fall outside the returned mask."""
    if seed is None:
        seed = tuple(d // 2 for d in vol.dims)
    seed = tuple(int(s) for s in seed)
    if len(seed) != 3 or any(s < 0 or s >= d for s, d in zip(seed, vol.dims)):
        raise ValueError(f"seed {seed} outside volume dims {vol.dims}")
    if vol.data[seed] < threshold:
        raise ValueError(
            f"seed voxel value {vol.data[seed]:.6g} is below threshold "
            f"{threshold:.6g}")
    above = vol.data >= threshold
    labeled, _ = ndimage.label(above, structure=_CONN6)
    mask = (labeled == labeled[seed]).astype(np.uint8)
    return Mask3D(vol.dims, vol.spacing, mask, num_labels=1)


@dataclass
class AlignConfig:
    """Slice-alignment settings.  Search range and sweep count are not
    pinned by any reference; treat them as engineering defaults."""

    max_offset_mm: float = 5.0
    iterations: int = 50
    # Rows/columns whose peak gradient falls below this fraction of the
    # volume-wide peak contribute no edge correspondence.
    min_edge_frac: float = 0.05


def _edge_positions(vol: Volume3D):
    """Per-slice edge features: for every image row the x position (mm) of
    the peak |d/dx| and its strength, and symmetrically per column in y.

    Returns (pos_x, str_x, pos_y, str_y): the x pair of shape (nz, ny),
    the y pair of shape (nz, nx).
    """
    nx, ny, nz = vol.dims
    sx_mm, sy_mm = vol.spacing[0], vol.spacing[1]
    pos_x = np.zeros((nz, ny))
    str_x = np.zeros((nz, ny))
    pos_y = np.zeros((nz, nx))
    str_y = np.zeros((nz, nx))
    for k in range(nz):
        s = vol.data[:, :, k].astype(np.float64)
        gx = np.abs(np.gradient(s, sx_mm, axis=0, edge_order=1))
        gy = np.abs(np.gradient(s, sy_mm, axis=1, edge_order=1))
        ix = np.argmax(gx, axis=0)            # per column of constant y
        pos_x[k] = ix * sx_mm
        str_x[k] = gx[ix, np.arange(ny)]
        iy = np.argmax(gy, axis=1)
        pos_y[k] = iy * sy_mm
        str_y[k] = gy[np.arange(nx), iy]
    return pos_x, str_x, pos_y, str_y


def _roughness_1d(edges, strengths, offsets, floor) -> float:
    """Sum of squared adjacent-slice edge-point gaps after applying a
    per-slice offset; rows below the strength floor are skipped."""
    total = 0.0
    nz = edges.shape[0]
    for k in range(nz - 1):
        ok = (strengths[k] >= floor) & (strengths[k + 1] >= floor)
        if not ok.any():
            continue
        d = (edges[k + 1, ok] + offsets[k + 1]) - (edges[k, ok] + offsets[k])
        total += float(np.dot(d, d))
    return total


def _descend_1d(edges, strengths, floor, max_offset, iterations) -> np.ndarray:
    """Coordinate descent on per-slice scalar offsets for one axis.  Each
    slice update is the closed-form minimizer of its two adjacent-pair
    terms, clamped to the search box, so the objective never increases."""
    nz = edges.shape[0]
    off = np.zeros(nz)
    valid = strengths >= floor
    for _ in range(iterations):
        moved = 0.0
        for k in range(nz):
            num = 0.0
            cnt = 0
            if k > 0:
                ok = valid[k] & valid[k - 1]
                if ok.any():
                    num += float(np.sum(edges[k - 1, ok] + off[k - 1] - edges[k, ok]))
                    cnt += int(ok.sum())
            if k < nz - 1:
                ok = valid[k] & valid[k + 1]
                if ok.any():
                    num += float(np.sum(edges[k + 1, ok] + off[k + 1] - edges[k, ok]))
                    cnt += int(ok.sum())
            if cnt == 0:
                continue
            new = float(np.clip(num / cnt, -max_offset, max_offset))
            moved = max(moved, abs(new - off[k]))
            off[k] = new
        if moved < 1e-9:
            break
    # Remove the common-shift gauge freedom so the bulk of slices stays put.
    off -= np.median(off)
    return np.clip(off, -max_offset, max_offset)


def roughness(vol: Volume3D, offsets: SliceOffsets | None = None,
              config: AlignConfig | None = None) -> float:
    """Edge-feature surface-roughness objective for a volume under the
    given per-slice offsets (zero offsets if omitted)."""
    config = config or AlignConfig()
    pos_x, str_x, pos_y, str_y = _edge_positions(vol)
    off = (offsets.offsets_mm if offsets is not None
           else np.zeros((vol.dims[2], 2)))
    fx = config.min_edge_frac * str_x.max(initial=0.0)
    fy = config.min_edge_frac * str_y.max(initial=0.0)
    return (_roughness_1d(pos_x, str_x, off[:, 0], fx)
            + _roughness_1d(pos_y, str_y, off[:, 1], fy))


def align_slices(vol: Volume3D,
                 config: AlignConfig | None = None) -> tuple[Volume3D, SliceOffsets]:
    """Estimate and apply per-slice in-plane shifts that minimize the
    edge-feature roughness between neighboring slices."""
    config = config or AlignConfig()
    nz = vol.dims[2]
    if nz < 2:
        return vol, SliceOffsets(np.zeros((nz, 2)))
    pos_x, str_x, pos_y, str_y = _edge_positions(vol)
    fx = config.min_edge_frac * str_x.max(initial=0.0)
    fy = config.min_edge_frac * str_y.max(initial=0.0)
    off_x = _descend_1d(pos_x, str_x, fx, config.max_offset_mm, config.iterations)
    off_y = _descend_1d(pos_y, str_y, fy, config.max_offset_mm, config.iterations)
    off = np.stack([off_x, off_y], axis=1)

    before = (_roughness_1d(pos_x, str_x, np.zeros(nz), fx)
              + _roughness_1d(pos_y, str_y, np.zeros(nz), fy))
    after = (_roughness_1d(pos_x, str_x, off[:, 0], fx)
             + _roughness_1d(pos_y, str_y, off[:, 1], fy))
    if after > before:  # median re-gauge cannot cause this; belt and braces
        off = np.zeros((nz, 2))

    out = np.empty_like(vol.data)
    for k in range(nz):
        shift_vox = (off[k, 0] / vol.spacing[0], off[k, 1] / vol.spacing[1])
        if abs(shift_vox[0]) < 1e-12 and abs(shift_vox[1]) < 1e-12:
            out[:, :, k] = vol.data[:, :, k]
        else:
            out[:, :, k] = ndimage.shift(
                vol.data[:, :, k], shift_vox, order=1, mode="nearest")
    return Volume3D(vol.dims, vol.spacing, out), SliceOffsets(off)
