"""Dense 3D volumes: construction, normalization, patches, and VVOL file I/O.

A volume is a dense scalar field on a regular grid with per-axis voxel
spacing in millimeters. Voxel (i, j, k) addresses the x, y, z axes in that
order; the canonical flat layout (used on disk and by `flat()`) is x-fastest,
i.e. element (i, j, k) sits at index i + nx*(j + ny*k).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagic,
    ConfigError,
    DegenerateIntensityRange,
    HeaderMismatch,
    PatchOutOfBounds,
    TruncatedPayload,
)

VVOL_MAGIC = b"VOL3"
VVOL_VERSION = 1


class Volume3D:
    """Immutable 3D scalar field with voxel spacing.

    `data` is a float32 array of shape (nx, ny, nz); all values must be
    finite and spacing components strictly positive.
    """

    __slots__ = ("data", "spacing")

    def __init__(self, data, spacing=(1.0, 1.0, 1.0)):
        arr = np.array(data, dtype=np.float32, order="C", copy=True)
        if arr.ndim != 3:
            raise ConfigError(f"volume data must be 3-D, got shape {arr.shape}")
        if arr.size == 0:
            raise ConfigError("volume must contain at least one voxel")
        if not np.all(np.isfinite(arr)):
            raise ConfigError("volume contains NaN/Inf values")
        sx, sy, sz = (float(s) for s in spacing)
        if sx <= 0 or sy <= 0 or sz <= 0:
            raise ConfigError(f"spacing must be strictly positive, got {spacing}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", (sx, sy, sz))

    def __setattr__(self, name, value):
        raise AttributeError("Volume3D is immutable")

    @property
    def dims(self):
        return self.data.shape

    def flat(self):
        """Values as a 1-D array in x-fastest order."""
        return self.data.ravel(order="F")

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and bool(np.array_equal(self.data, other.data))
        )

    def __repr__(self):
        return f"Volume3D(dims={self.dims}, spacing={self.spacing})"


@dataclass(frozen=True)
class PatchSpec:
    """An axis-aligned crop: `size` voxels starting at voxel `origin`."""

    size: tuple[int, int, int]
    origin: tuple[int, int, int]

    def fits_in(self, dims) -> bool:
        return all(
            0 <= o and o + s <= d for o, s, d in zip(self.origin, self.size, dims)
        )


def normalize_intensity(v: Volume3D, mode: str = "min_max_01") -> Volume3D:
    """Rescale intensities; `min_max_01` maps the range onto [0, 1],
    `zscore` maps to mean 0 and population standard deviation 1."""
    if mode == "min_max_01":
        lo = float(v.data.min())
        hi = float(v.data.max())
        if hi <= lo:
            raise DegenerateIntensityRange(
                f"constant volume (value {lo}) cannot be min-max normalized"
            )
        out = (v.data.astype(np.float64) - lo) / (hi - lo)
    elif mode == "zscore":
        mu = float(v.data.mean(dtype=np.float64))
        sigma = float(v.data.std(dtype=np.float64))  # population (ddof=0)
        if sigma == 0.0:
            raise DegenerateIntensityRange("constant volume has zero std")
        out = (v.data.astype(np.float64) - mu) / sigma
    else:
        raise ConfigError(f"unknown normalization mode {mode!r}")
    return Volume3D(out.astype(np.float32), v.spacing)


def extract_patch(v: Volume3D, spec: PatchSpec) -> Volume3D:
    """Copy the sub-volume selected by `spec`; spacing is inherited."""
    if not spec.fits_in(v.dims):
        raise PatchOutOfBounds(
            f"patch size={spec.size} origin={spec.origin} exceeds dims {v.dims}"
        )
    ox, oy, oz = spec.origin
    px, py, pz = spec.size
    return Volume3D(v.data[ox : ox + px, oy : oy + py, oz : oz + pz], v.spacing)


def random_patch_spec(dims, size, rng: np.random.Generator) -> PatchSpec:
    """Draw a patch origin uniformly over all in-bounds positions."""
    if any(s > d or s <= 0 for s, d in zip(size, dims)):
        raise PatchOutOfBounds(f"patch size {size} does not fit in dims {dims}")
    origin = tuple(int(rng.integers(0, d - s + 1)) for s, d in zip(size, dims))
    return PatchSpec(size=tuple(int(s) for s in size), origin=origin)


def save_volume(v: Volume3D, path) -> None:
    """Write a volume in the VVOL format.

    Layout (little-endian): magic 'VOL3', version u32, nx/ny/nz u32,
    sx/sy/sz f32, then nx*ny*nz f32 values in x-fastest order.
    """
    nx, ny, nz = v.dims
    header = struct.pack(
        "<4sIIIIfff", VVOL_MAGIC, VVOL_VERSION, nx, ny, nz, *v.spacing
    )
    payload = v.flat().astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def load_volume(path) -> Volume3D:
    """Read a VVOL file; round trip with `save_volume` is bit-exact."""
    with open(path, "rb") as f:
        raw = f.read()
    header_size = struct.calcsize("<4sIIIIfff")
    if len(raw) < 4 or raw[:4] != VVOL_MAGIC:
        raise BadMagic(f"{path}: expected magic {VVOL_MAGIC!r}")
    if len(raw) < header_size:
        raise TruncatedPayload(f"{path}: header truncated at {len(raw)} bytes")
    _, version, nx, ny, nz, sx, sy, sz = struct.unpack(
        "<4sIIIIfff", raw[:header_size]
    )
    if version != VVOL_VERSION:
        raise HeaderMismatch(f"{path}: unsupported format version {version}")
    if nx == 0 or ny == 0 or nz == 0:
        raise HeaderMismatch(f"{path}: zero dimension in header ({nx},{ny},{nz})")
    count = nx * ny * nz
    expected = header_size + 4 * count
    if len(raw) < expected:
        raise TruncatedPayload(
            f"{path}: payload holds {(len(raw) - header_size) // 4} of {count} voxels"
        )
    if len(raw) > expected:
        raise HeaderMismatch(f"{path}: {len(raw) - expected} trailing bytes")
    values = np.frombuffer(raw, dtype="<f4", count=count, offset=header_size)
    data = values.reshape((nx, ny, nz), order="F")
    return Volume3D(data, (sx, sy, sz))
