"""Voxelwise GLM lesion-symptom mapping with permutation FWE control.

The design has columns ``[intercept, score, age, gender]``. Family-wise
error is controlled with the maximum-statistic permutation test using the
Freedman-Lane scheme: residuals of the nuisance-only model are permuted and
added back to its fitted values before refitting the full model.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import GeometryError, ParameterError, ValidationError
from .volume import BinaryMask, ScalarVolume, check_compatible, load_nifti, percentile

log = logging.getLogger(__name__)

COLUMNS = ("intercept", "score", "age", "gender")
DEFAULT_CONTRAST = (0.0, 1.0, 0.0, 0.0)


@dataclass(frozen=True)
class Subject:
    subject_id: str
    ppm_path: str
    score: float
    age: float
    gender: int


@dataclass(frozen=True)
class CohortTable:
    rows: tuple[Subject, ...]

    def __post_init__(self):
        rows = tuple(self.rows)
        ids = [r.subject_id for r in rows]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate subject ids: {dup}")
        for r in rows:
            if not (math.isfinite(r.score) and math.isfinite(r.age)):
                raise ValidationError(f"{r.subject_id}: score and age must be finite")
            if r.score < 0:
                raise ValidationError(f"{r.subject_id}: score must be >= 0, got {r.score}")
            if r.gender not in (0, 1):
                raise ValidationError(f"{r.subject_id}: gender must be 0 or 1, got {r.gender}")
        if len(rows) < len(COLUMNS) + 2:
            raise ValidationError(
                f"need at least {len(COLUMNS) + 2} subjects for a {len(COLUMNS)}-column design, "
                f"got {len(rows)}"
            )
        object.__setattr__(self, "rows", rows)

    def __len__(self):
        return len(self.rows)

    @classmethod
    def read_csv(cls, path) -> CohortTable:
        path = Path(path)
        required = ("subject_id", "ppm_path", "score", "age", "gender")
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in required if c not in (reader.fieldnames or [])]
            if missing:
                raise ValidationError(f"{path}: missing columns {missing}")
            rows = []
            for n, rec in enumerate(reader, start=2):
                if any(rec[c] is None or rec[c].strip() == "" for c in required):
                    raise ValidationError(f"{path}:{n}: missing value")
                ppm = Path(rec["ppm_path"])
                if not ppm.is_absolute():
                    ppm = path.parent / ppm
                try:
                    rows.append(
                        Subject(
                            rec["subject_id"].strip(),
                            str(ppm),
                            float(rec["score"]),
                            float(rec["age"]),
                            int(float(rec["gender"])),
                        )
                    )
                except ValueError as exc:
                    raise ValidationError(f"{path}:{n}: {exc}") from exc
        return cls(tuple(rows))


@dataclass(frozen=True)
class DesignMatrix:
    matrix: np.ndarray
    contrast: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_CONTRAST))

    def __post_init__(self):
        x = np.asarray(self.matrix, dtype=np.float64)
        c = np.asarray(self.contrast, dtype=np.float64).ravel()
        if x.ndim != 2:
            raise ParameterError("design matrix must be 2D")
        if c.size != x.shape[1]:
            raise ParameterError(f"contrast has {c.size} entries for {x.shape[1]} columns")
        if not np.all(x[:, 0] == 1.0):
            raise ParameterError("first design column must be the intercept (all ones)")
        if np.linalg.matrix_rank(x) < x.shape[1]:
            raise ParameterError("design matrix is rank deficient")
        if x.shape[0] < x.shape[1] + 2:
            raise ParameterError(f"need n >= p + 2 rows, got n={x.shape[0]}, p={x.shape[1]}")
        object.__setattr__(self, "matrix", x)
        object.__setattr__(self, "contrast", c)

    @classmethod
    def from_cohort(cls, cohort: CohortTable, contrast=DEFAULT_CONTRAST) -> DesignMatrix:
        x = np.array([[1.0, r.score, r.age, float(r.gender)] for r in cohort.rows])
        return cls(x, np.asarray(contrast, dtype=np.float64))

    @property
    def n(self):
        return self.matrix.shape[0]

    @property
    def p(self):
        return self.matrix.shape[1]


@dataclass(frozen=True)
class Cluster:
    size: int
    peak_t: float
    peak_index: tuple[int, int, int]


@dataclass
class GLMResult:
    beta: list[ScalarVolume]
    t_map: ScalarVolume
    fwe_threshold: float
    clusters: list[Cluster]
    significant_mask: BinaryMask
    null_max: np.ndarray | None = None


# ---------------------------------------------------------------- fitting


class _OLS:
    """Reusable pieces of an OLS fit for a fixed design and contrast."""

    def __init__(self, x: np.ndarray, c: np.ndarray):
        self.x = x
        self.c = c
        self.xtx_inv = np.linalg.inv(x.T @ x)
        self.pinv = self.xtx_inv @ x.T
        self.dof = x.shape[0] - x.shape[1]
        self.c_var = float(c @ self.xtx_inv @ c)

    def fit(self, y: np.ndarray):
        """``y`` is (n, V); returns beta (p, V) and t (V,)."""
        beta = self.pinv @ y
        resid = y - self.x @ beta
        sigma2 = np.einsum("ij,ij->j", resid, resid) / self.dof
        effect = self.c @ beta
        se = np.sqrt(sigma2 * self.c_var)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = effect / se
        # voxels with no residual variance and no effect carry no evidence
        t[np.isnan(t)] = 0.0
        return beta, t


def _stack(volumes: Sequence[ScalarVolume], mask: BinaryMask | None = None):
    if len(volumes) == 0:
        raise ValidationError("no volumes given")
    ref = volumes[0]
    for v in volumes[1:]:
        try:
            check_compatible(ref, v)
        except GeometryError as exc:
            raise GeometryError(f"subject volumes do not share a grid: {exc}") from exc
    if mask is None:
        sel = np.ones(ref.dims, dtype=bool)
    else:
        check_compatible(ref, mask)
        sel = mask.data.astype(bool)
    y = np.stack([np.asarray(v.data, dtype=np.float64)[sel] for v in volumes])
    return y, sel, ref.geometry


def _unflatten(values: np.ndarray, sel: np.ndarray) -> np.ndarray:
    out = np.zeros(sel.shape, dtype=np.float64)
    out[sel] = values
    return out


def fit_voxelwise(volumes: Sequence[ScalarVolume], design: DesignMatrix, mask=None):
    """Ordinary least squares at every voxel.

    Returns ``(betas, t_map)`` where ``betas`` holds one volume per design
    column and ``t_map`` is the t statistic of the design contrast.
    """
    if len(volumes) != design.n:
        raise ValidationError(f"{len(volumes)} volumes for a design with {design.n} rows")
    y, sel, geom = _stack(volumes, mask)
    beta, t = _OLS(design.matrix, design.contrast).fit(y)
    betas = [ScalarVolume(_unflatten(b, sel), geom) for b in beta]
    return betas, ScalarVolume(_unflatten(t, sel), geom)


def _max_stat(t: np.ndarray, two_sided: bool) -> float:
    return float(np.max(np.abs(t)) if two_sided else np.max(t))


def permutation_null(
    y: np.ndarray,
    design: DesignMatrix,
    contrast=None,
    n_perm: int = 1000,
    rng_seed: int = 0,
    two_sided: bool = False,
) -> np.ndarray:
    """Max-t null distribution by Freedman-Lane permutation on an (n, V) matrix.

    The first sample is the identity permutation. Nuisance columns are those
    with a zero contrast weight.
    """
    if n_perm < 100:
        raise ParameterError(f"n_perm must be >= 100, got {n_perm}")
    x = design.matrix
    c = design.contrast if contrast is None else np.asarray(contrast, dtype=np.float64)
    ols = _OLS(x, c)
    z = x[:, c == 0]
    hat_z = z @ np.linalg.pinv(z)
    fitted = hat_z @ y
    resid = y - fitted
    rng = np.random.default_rng(rng_seed)
    maxes = np.empty(n_perm)
    n = x.shape[0]
    for b in range(n_perm):
        perm = np.arange(n) if b == 0 else rng.permutation(n)
        _, t = ols.fit(fitted + resid[perm])
        maxes[b] = _max_stat(t, two_sided)
    return maxes


def permutation_fwe(
    volumes,
    design: DesignMatrix,
    contrast=None,
    n_perm: int = 1000,
    alpha: float = 0.05,
    rng_seed: int = 0,
    two_sided: bool = False,
    mask=None,
) -> float:
    """FWE-corrected t threshold: the (1 - alpha) quantile of the max-t null."""
    if not 0.0 < alpha <= 1.0:
        raise ParameterError(f"alpha must lie in (0, 1], got {alpha}")
    y = volumes if isinstance(volumes, np.ndarray) else _stack(volumes, mask)[0]
    null = permutation_null(y, design, contrast, n_perm, rng_seed, two_sided)
    return percentile(null, 1.0 - alpha)


def cluster_extent(t_map: ScalarVolume, threshold: float, min_extent: int = 100):
    """26-connected suprathreshold clusters of at least ``min_extent`` voxels.

    Returns ``(clusters, significant_mask)`` with clusters sorted by peak t,
    highest first.
    """
    if min_extent < 1:
        raise ParameterError(f"min_extent must be >= 1, got {min_extent}")
    t = np.asarray(t_map.data, dtype=np.float64)
    supra = t >= threshold
    labels, n = ndimage.label(supra, structure=np.ones((3, 3, 3), dtype=bool))
    keep = np.zeros(t.shape, dtype=bool)
    clusters = []
    if n:
        sizes = np.bincount(labels.ravel(), minlength=n + 1)
        for lab in range(1, n + 1):
            if sizes[lab] < min_extent:
                continue
            member = labels == lab
            keep |= member
            flat = np.flatnonzero(member.ravel())
            best = flat[np.argmax(t.ravel()[flat])]
            peak = tuple(int(v) for v in np.unravel_index(best, t.shape))
            clusters.append(Cluster(int(sizes[lab]), float(t.ravel()[best]), peak))
    clusters.sort(key=lambda c: (-c.peak_t, c.peak_index))
    return clusters, BinaryMask(keep.astype(np.uint8), t_map.geometry)


def run_glm(
    volumes,
    design: DesignMatrix,
    n_perm: int = 1000,
    alpha: float = 0.05,
    min_extent: int = 100,
    rng_seed: int = 0,
    two_sided: bool = False,
    mask: BinaryMask | None = None,
) -> GLMResult:
    """Fit, derive the FWE threshold, and keep clusters above the extent."""
    if len(volumes) != design.n:
        raise ValidationError(f"{len(volumes)} volumes for a design with {design.n} rows")
    y, sel, geom = _stack(volumes, mask)
    beta, t = _OLS(design.matrix, design.contrast).fit(y)
    null = permutation_null(y, design, None, n_perm, rng_seed, two_sided)
    threshold = percentile(null, 1.0 - alpha)
    t_map = ScalarVolume(_unflatten(t, sel), geom)
    stat = np.abs(t_map.data) if two_sided else t_map.data.copy()
    stat[~sel] = -np.inf
    clusters, sig = cluster_extent(ScalarVolume(stat, geom), threshold, min_extent)
    log.info("FWE threshold %.4f, %d cluster(s)", threshold, len(clusters))
    return GLMResult(
        [ScalarVolume(_unflatten(b, sel), geom) for b in beta], t_map, threshold, clusters, sig, null
    )


def load_cohort_volumes(cohort: CohortTable) -> list[ScalarVolume]:
    return [load_nifti(r.ppm_path) for r in cohort.rows]


def write_clusters_csv(clusters: Sequence[Cluster], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "size", "peak_t", "peak_i", "peak_j", "peak_k"])
        for n, c in enumerate(clusters, start=1):
            w.writerow([n, c.size, f"{c.peak_t:.6g}", *c.peak_index])
