"""Volumetric data model, NIfTI-1 I/O and small numeric helpers.

Volumes are held as 3D numpy arrays indexed ``[i, j, k]`` (x, y, z). On
disk NIfTI stores x-fastest, which nibabel maps onto the same indexing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import nibabel as nib
import numpy as np
from nibabel.filebasedimages import ImageFileError
from scipy import ndimage

from .errors import (
    DataError,
    GeometryError,
    NiftiFormatError,
    ParameterError,
    UnsupportedShapeError,
)

SPACING_TOL = 1e-4
AFFINE_TOL = 1e-3
FWHM_TO_SIGMA = 1.0 / math.sqrt(8.0 * math.log(2.0))

_READABLE_DTYPES = {
    np.dtype(np.uint8),
    np.dtype(np.int16),
    np.dtype(np.int32),
    np.dtype(np.float32),
    np.dtype(np.float64),
}


@dataclass(frozen=True)
class GridGeometry:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    affine: np.ndarray = field(compare=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or min(dims) < 1:
            raise ParameterError(f"dims must be three positive integers, got {self.dims}")
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise ParameterError(f"spacing must be three positive reals, got {self.spacing}")
        affine = np.asarray(self.affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise ParameterError(f"affine must be 4x4, got shape {affine.shape}")
        affine = affine.copy()
        affine.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    @classmethod
    def from_spacing(cls, dims, spacing=(1.0, 1.0, 1.0)):
        return cls(dims, spacing, np.diag([*spacing, 1.0]))

    def is_compatible(self, other: GridGeometry) -> bool:
        return _first_mismatch(self, other) is None


def _first_mismatch(a: GridGeometry, b: GridGeometry):
    if a.dims != b.dims:
        return "dims", a.dims, b.dims
    if any(abs(x - y) > SPACING_TOL for x, y in zip(a.spacing, b.spacing)):
        return "spacing", a.spacing, b.spacing
    if np.max(np.abs(a.affine - b.affine)) > AFFINE_TOL:
        return "affine", a.affine.tolist(), b.affine.tolist()
    return None


def check_compatible(a, b) -> None:
    """Raise :class:`GeometryError` unless ``a`` and ``b`` share a grid.

    Accepts geometries or anything with a ``geometry`` attribute. Dims must
    match exactly, spacing within 1e-4 mm and affine entries within 1e-3.
    """
    ga = getattr(a, "geometry", a)
    gb = getattr(b, "geometry", b)
    mismatch = _first_mismatch(ga, gb)
    if mismatch is not None:
        name, va, vb = mismatch
        raise GeometryError(f"grid mismatch in {name}: {va} vs {vb}")


def _freeze(arr):
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScalarVolume:
    """A real-valued 3D image on a known grid.

    ``data`` is float32 when loaded from disk; solver outputs may keep
    float64 so that downstream comparisons are not limited by rounding.
    """

    data: np.ndarray
    geometry: GridGeometry

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        if data.shape != self.geometry.dims:
            raise ParameterError(
                f"data shape {data.shape} does not match dims {self.geometry.dims}"
            )
        object.__setattr__(self, "data", _freeze(np.array(data, copy=True)))

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0), affine=None):
        data = np.asarray(data)
        if affine is None:
            geom = GridGeometry.from_spacing(data.shape, spacing)
        else:
            geom = GridGeometry(data.shape, spacing, affine)
        return cls(data, geom)

    @property
    def dims(self):
        return self.geometry.dims

    @property
    def spacing(self):
        return self.geometry.spacing

    @property
    def affine(self):
        return self.geometry.affine

    def with_data(self, data) -> ScalarVolume:
        return ScalarVolume(data, self.geometry)


@dataclass(frozen=True)
class BinaryMask:
    data: np.ndarray
    geometry: GridGeometry

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.shape != self.geometry.dims:
            raise ParameterError(
                f"mask shape {data.shape} does not match dims {self.geometry.dims}"
            )
        if data.dtype != np.bool_:
            if not np.isin(data, (0, 1)).all():
                raise ParameterError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "data", _freeze(data.astype(np.uint8)))

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0), affine=None):
        data = np.asarray(data)
        if affine is None:
            geom = GridGeometry.from_spacing(data.shape, spacing)
        else:
            geom = GridGeometry(data.shape, spacing, affine)
        return cls(data, geom)

    @property
    def dims(self):
        return self.geometry.dims

    def count(self) -> int:
        return int(self.data.sum())

    def indices(self) -> np.ndarray:
        """Foreground voxel indices, shape (n, 3), lexicographic order."""
        return np.argwhere(self.data)

    def as_volume(self) -> ScalarVolume:
        return ScalarVolume(self.data.astype(np.float32), self.geometry)


# ---------------------------------------------------------------- NIfTI I/O


def load_nifti(path) -> ScalarVolume:
    """Read a single-file NIfTI-1 image (.nii or .nii.gz) as float32.

    Intensity scaling (``scl_slope``/``scl_inter``) is applied. The affine
    comes from the sform when ``sform_code > 0``, else the qform when
    ``qform_code > 0``, else ``diag(pixdim)``.
    """
    path = Path(path)
    try:
        img = nib.load(str(path))
    except FileNotFoundError:
        raise
    except (ImageFileError, nib.spatialimages.HeaderDataError, ValueError, EOFError, OSError) as exc:
        raise NiftiFormatError(f"{path}: not a readable NIfTI-1 file ({exc})") from exc
    if not isinstance(img, nib.Nifti1Image) or isinstance(img, nib.Nifti2Image):
        raise NiftiFormatError(f"{path}: expected a single-file NIfTI-1 image")
    hdr = img.header
    if hdr["magic"].item() != b"n+1":
        raise NiftiFormatError(f"{path}: bad magic {hdr['magic'].item()!r}")

    dtype = hdr.get_data_dtype()
    if dtype not in _READABLE_DTYPES:
        raise NiftiFormatError(f"{path}: unsupported datatype {dtype}")

    shape = img.shape
    if len(shape) < 3:
        shape = tuple(shape) + (1,) * (3 - len(shape))
    if any(d != 1 for d in shape[3:]):
        raise UnsupportedShapeError(
            f"{path}: expected a 3D volume, got shape {img.shape}"
        )
    shape = tuple(shape[:3])

    try:
        raw = np.asarray(img.dataobj, dtype=np.float64)
    except (ValueError, EOFError, OSError) as exc:
        raise NiftiFormatError(f"{path}: could not read voxel data ({exc})") from exc
    raw = raw.reshape(shape)
    bad = ~np.isfinite(raw)
    if bad.any():
        raise DataError(f"{path}: {int(bad.sum())} voxel(s) are NaN or infinite")

    zooms = [float(z) for z in hdr["pixdim"][1:4]]
    if not all(z > 0 for z in zooms):
        raise NiftiFormatError(f"{path}: pixdim must be positive, got {zooms}")

    sform, scode = hdr.get_sform(coded=True)
    qform, qcode = hdr.get_qform(coded=True)
    if scode and scode > 0:
        affine = sform
    elif qcode and qcode > 0:
        affine = qform
    else:
        affine = np.diag([*zooms, 1.0])

    return ScalarVolume(raw.astype(np.float32), GridGeometry(shape, zooms, affine))


def save_nifti(vol, path) -> None:
    """Write ``vol`` (or a :class:`BinaryMask`) as a float32 NIfTI-1 file."""
    path = Path(path)
    data = np.asarray(vol.data, dtype=np.float32)
    img = nib.Nifti1Image(data, vol.geometry.affine)
    img.header.set_zooms(vol.geometry.spacing)
    img.header.set_sform(vol.geometry.affine, code=2)
    img.header.set_qform(vol.geometry.affine, code=0)
    img.header.set_data_dtype(np.float32)
    try:
        nib.save(img, str(path))
    except OSError as exc:
        raise OSError(f"could not write {path}: {exc}") from exc


def load_mask(path) -> BinaryMask:
    vol = load_nifti(path)
    return BinaryMask((vol.data > 0.5).astype(np.uint8), vol.geometry)


# ---------------------------------------------------------------- numerics


def percentile(values: Sequence[float], q: float) -> float:
    """Linearly interpolated percentile at fraction ``q`` on (n-1) spacing."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("percentile of an empty sequence")
    if not 0.0 <= q <= 1.0:
        raise ParameterError(f"q must lie in [0, 1], got {q}")
    p = q * (v.size - 1)
    lo = int(math.floor(p))
    hi = int(math.ceil(p))
    return float(v[lo] + (p - lo) * (v[hi] - v[lo]))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled Gaussian truncated at 4 sigma and normalised to unit sum."""
    radius = max(int(math.ceil(4.0 * sigma)), 1)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(vol: ScalarVolume, fwhm: float, units: str = "voxel") -> ScalarVolume:
    """Separable Gaussian smoothing with replicate boundaries.

    ``fwhm`` is a full width at half maximum in voxels (``units="voxel"``)
    or millimetres (``units="mm"``).
    """
    if not fwhm > 0:
        raise ParameterError(f"fwhm must be positive, got {fwhm}")
    if units == "voxel":
        sigmas = [fwhm * FWHM_TO_SIGMA] * 3
    elif units == "mm":
        sigmas = [fwhm * FWHM_TO_SIGMA / s for s in vol.spacing]
    else:
        raise ParameterError(f"units must be 'voxel' or 'mm', got {units!r}")

    out = np.asarray(vol.data, dtype=np.float64)
    for axis, sigma in enumerate(sigmas):
        out = ndimage.correlate1d(out, gaussian_kernel(sigma), axis=axis, mode="nearest")
    return vol.with_data(out.astype(vol.data.dtype))
