"""Rank-correlation comparison of a PPM against a reference perfusion map."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .errors import DegenerateInputError, EmptySelectionError, ParameterError
from .volume import BinaryMask, ScalarVolume, check_compatible, gaussian_smooth


@dataclass(frozen=True)
class ComparisonReport:
    rho_raw: float
    rho_smoothed: float
    p_value: float
    n_voxels: int
    fwhm_used: float

    def as_row(self) -> dict:
        return asdict(self)


def average_ranks(values) -> np.ndarray:
    """1-based ranks with ties replaced by their mean rank."""
    x = np.asarray(values, dtype=np.float64).ravel()
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], xs.size]
    mean_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(mean_rank, ends - starts)
    return ranks


def spearman(a, b) -> tuple[float, float]:
    """Spearman's rho with average-rank ties and a two-sided t-approximation p.

    Raises :class:`DegenerateInputError` when either input has constant ranks.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ParameterError(f"length mismatch: {a.size} vs {b.size}")
    n = a.size
    if n < 3:
        raise ParameterError(f"need at least 3 pairs, got {n}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ParameterError("inputs must be finite")
    ra = average_ranks(a)
    rb = average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if denom == 0.0:
        raise DegenerateInputError("correlation undefined: an input has zero rank variance")
    rho = float(np.clip((ra @ rb) / denom, -1.0, 1.0))
    if abs(rho) == 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    p = float(2.0 * stats.t.sf(abs(t), n - 2))
    return rho, min(p, 1.0)


def correlate_scalar(pairs) -> tuple[float, float]:
    """Spearman rho and p for paired scalars, e.g. similarity index vs age."""
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    return spearman(arr[:, 0], arr[:, 1])


def compare_maps(
    ppm: ScalarVolume,
    reference: ScalarVolume,
    mask: BinaryMask | None = None,
    fwhm_voxels: float = 10.0,
    smooth: bool = True,
    units: str = "voxel",
) -> ComparisonReport:
    """Correlate ``ppm`` with ``reference`` before and after Gaussian smoothing.

    Both maps are smoothed over the full grid, then sampled inside ``mask``
    (all voxels if None). With ``smooth=False`` the smoothed fields repeat
    the raw values and ``fwhm_used`` is 0.
    """
    check_compatible(ppm, reference)
    if mask is None:
        sel = np.ones(ppm.dims, dtype=bool)
    else:
        check_compatible(ppm, mask)
        sel = mask.data.astype(bool)
        if not sel.any():
            raise EmptySelectionError("comparison mask is empty")

    rho_raw, p_raw = spearman(ppm.data[sel], reference.data[sel])
    if smooth:
        a = gaussian_smooth(ppm, fwhm_voxels, units)
        b = gaussian_smooth(reference, fwhm_voxels, units)
        rho_s, p_s = spearman(a.data[sel], b.data[sel])
        fwhm = float(fwhm_voxels)
    else:
        rho_s, p_s, fwhm = rho_raw, p_raw, 0.0
    return ComparisonReport(rho_raw, rho_s, p_s, int(sel.sum()), fwhm)
