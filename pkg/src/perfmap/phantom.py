"""Synthetic CT/CTA pairs containing a tubular tree with known arrival times."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .eikonal import DEFAULT_EPSILON
from .errors import ParameterError, PerfmapError
from .vesselseg import SeedSet
from .volume import BinaryMask, GridGeometry, ScalarVolume, save_nifti

AXIS_DIRECTIONS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


class GenerationError(PerfmapError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (96, 96, 96)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    root: tuple[int, int, int] | None = None
    branches: int = 7
    branch_length_range: tuple[int, int] = (16, 30)
    vessel_radius: float = 2.0
    contrast_intensity: float = 300.0
    tissue_intensity: float = 40.0
    noise_sigma: float = 0.0
    rng_seed: int = 0
    tortuosity: float = 0.3
    max_retries: int = 200

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        root = self.root
        if root is None:
            r = int(np.ceil(self.vessel_radius)) + 2
            root = (dims[0] // 2, dims[1] // 2, r)
        object.__setattr__(self, "root", tuple(int(v) for v in root))
        lo, hi = (int(v) for v in self.branch_length_range)
        object.__setattr__(self, "branch_length_range", (lo, hi))
        if self.branches < 1:
            raise ParameterError("branches must be >= 1")
        if not 1 <= lo <= hi:
            raise ParameterError(f"invalid branch_length_range {self.branch_length_range}")
        if self.vessel_radius < 1:
            raise ParameterError("vessel_radius must be >= 1")
        if not self.contrast_intensity > 0:
            raise ParameterError("contrast_intensity must be > 0")
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be >= 0")
        if not 0.0 <= self.tortuosity <= 1.0:
            raise ParameterError("tortuosity must lie in [0, 1]")
        margin = int(np.ceil(self.vessel_radius)) + 1
        if any(not margin <= c < d - margin for c, d in zip(self.root, dims)):
            raise ParameterError(f"root {self.root} too close to the grid edge for radius {self.vessel_radius}")

    @classmethod
    def from_mapping(cls, values: dict) -> PhantomSpec:
        """Build from string values such as ``{"dims": "64,64,64"}``."""
        kinds = {f.name: f for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ParameterError(f"unknown phantom parameter {key!r}")
            text = str(raw).strip()
            if key in ("dims", "root", "branch_length_range"):
                kw[key] = tuple(int(float(v)) for v in text.split(","))
            elif key == "spacing":
                kw[key] = tuple(float(v) for v in text.split(","))
            elif key in ("branches", "rng_seed", "max_retries"):
                kw[key] = int(text)
            else:
                kw[key] = float(text)
        return cls(**kw)


@dataclass(frozen=True)
class PhantomBundle:
    ct: ScalarVolume
    cta: ScalarVolume
    true_vessel_mask: BinaryMask
    true_centerline: SeedSet
    true_arrival: ScalarVolume
    spec: PhantomSpec
    true_branches: tuple = ()

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "ct": out / "ct.nii.gz",
            "cta": out / "cta.nii.gz",
            "vessel_mask": out / "true_vessel_mask.nii.gz",
            "arrival": out / "true_arrival.nii.gz",
            "centerline": out / "true_centerline.csv",
        }
        save_nifti(self.ct, paths["ct"])
        save_nifti(self.cta, paths["cta"])
        save_nifti(self.true_vessel_mask, paths["vessel_mask"])
        save_nifti(self.true_arrival, paths["arrival"])
        self.true_centerline.write_csv(paths["centerline"])
        return paths


def _grow_segment(rng, start, direction, length, tortuosity, lo_bound, hi_bound):
    """Axis-biased random walk; None if it leaves the allowed box."""
    pts = [np.asarray(start)]
    d = np.asarray(direction)
    others = [a for a in range(3) if d[a] == 0]
    for _ in range(length):
        step = d.copy()
        if rng.random() < tortuosity:
            step[others[rng.integers(2)]] = rng.choice((-1, 1))
        p = pts[-1] + step
        if (p < lo_bound).any() or (p > hi_bound).any():
            return None
        pts.append(p)
    return np.array(pts[1:])


def _grow_tree(spec: PhantomSpec, rng):
    """Return centreline points, their arc length from the root, and the
    per-branch point lists in growth order."""
    dims = np.asarray(spec.dims)
    margin = int(np.ceil(spec.vessel_radius)) + 1
    lo_bound, hi_bound = np.full(3, margin), dims - 1 - margin
    clearance = 2 * spec.vessel_radius + 2
    occupied = np.zeros(spec.dims, dtype=bool)

    root = np.asarray(spec.root)
    points = [root]
    arcs = [0.0]
    occupied[tuple(root)] = True
    # queue of (start point, arc at start, incoming direction)
    pending = [(root, 0.0, (0, 0, 1))]
    placed = 0
    segments = []
    first = True
    while placed < spec.branches:
        if not pending:
            raise GenerationError(f"tree stopped growing after {placed} of {spec.branches} branches")
        start, arc0, incoming = pending.pop(0)
        n_children = 1 if first else 2
        first = False
        for _ in range(n_children):
            if placed >= spec.branches:
                break
            for _attempt in range(spec.max_retries):
                if placed == 0:
                    direction = (0, 0, 1)
                else:
                    options = [d for d in AXIS_DIRECTIONS if d != tuple(-v for v in incoming)]
                    direction = options[rng.integers(len(options))]
                length = int(rng.integers(spec.branch_length_range[0], spec.branch_length_range[1] + 1))
                seg = _grow_segment(rng, start, direction, length, spec.tortuosity, lo_bound, hi_bound)
                if seg is None:
                    continue
                # keep clear of the existing tree once away from the junction
                far = seg[int(np.ceil(clearance)) :]
                if len(far) and _near(occupied, far, clearance):
                    continue
                break
            else:
                raise GenerationError(
                    f"could not place branch {placed + 1} inside the grid after {spec.max_retries} retries"
                )
            steps = np.linalg.norm(np.diff(np.vstack([start, seg]) * np.asarray(spec.spacing), axis=0), axis=1)
            seg_arcs = arc0 + np.cumsum(steps)
            points.extend(seg)
            arcs.extend(seg_arcs.tolist())
            occupied[tuple(seg.T)] = True
            segments.append(seg)
            pending.append((seg[-1], float(seg_arcs[-1]), direction))
            placed += 1
    return np.array(points), np.array(arcs), segments


def _near(occupied, pts, radius):
    r = int(np.ceil(radius))
    shape = np.asarray(occupied.shape)
    for p in pts:
        lo = np.maximum(p - r, 0)
        hi = np.minimum(p + r + 1, shape)
        box = occupied[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
        if not box.any():
            continue
        idx = np.argwhere(box) + lo
        if (np.linalg.norm(idx - p, axis=1) <= radius).any():
            return True
    return False


def generate_phantom(spec: PhantomSpec = PhantomSpec()) -> PhantomBundle:
    """Grow a random tube tree and render CT, CTA and ground-truth volumes.

    Ground-truth arrival along the tree is centreline arc length from the
    root; a tube voxel takes the value of its nearest centreline voxel plus
    the distance to it. Tissue voxels add ``distance-to-tube / epsilon`` to
    the value at their nearest tube voxel, the same slow-tissue model the
    solver applies with its default speed floor.
    """
    rng = np.random.default_rng(spec.rng_seed)
    geom = GridGeometry.from_spacing(spec.dims, spec.spacing)
    points, arcs, segments = _grow_tree(spec, rng)

    centre = np.zeros(spec.dims, dtype=bool)
    arc_map = np.full(spec.dims, np.inf)
    for p, a in zip(points, arcs):
        arc_map[tuple(p)] = min(arc_map[tuple(p)], a)
        centre[tuple(p)] = True

    dist_c, nearest_c = ndimage.distance_transform_edt(~centre, sampling=spec.spacing, return_indices=True)
    tube = dist_c <= spec.vessel_radius * min(spec.spacing) + 1e-9
    tube_time = arc_map[tuple(nearest_c)] + dist_c

    dist_t, nearest_t = ndimage.distance_transform_edt(~tube, sampling=spec.spacing, return_indices=True)
    arrival = np.where(tube, tube_time, tube_time[tuple(nearest_t)] + dist_t / DEFAULT_EPSILON)

    ct = np.full(spec.dims, spec.tissue_intensity, dtype=np.float64)
    if spec.noise_sigma > 0:
        ct += rng.normal(0.0, spec.noise_sigma, spec.dims)
    cta = ct + spec.contrast_intensity * tube
    if spec.noise_sigma > 0:
        cta += rng.normal(0.0, spec.noise_sigma, spec.dims)

    return PhantomBundle(
        ct=ScalarVolume(ct.astype(np.float32), geom),
        cta=ScalarVolume(cta.astype(np.float32), geom),
        true_vessel_mask=BinaryMask(tube.astype(np.uint8), geom),
        true_centerline=SeedSet(np.argwhere(centre), geom),
        true_arrival=ScalarVolume(arrival.astype(np.float32), geom),
        spec=spec,
        true_branches=tuple(segments),
    )
