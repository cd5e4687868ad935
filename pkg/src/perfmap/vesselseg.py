"""Vessel mask, centreline thinning and seed selection.

Thinning follows the border-peeling scheme of Lee, Kashyap & Chu (1994) as
used by ITK's BinaryThinningImageFilter3D: sub-iterations over the six
border directions, deleting border voxels that are not line ends, keep the
local Euler characteristic and are simple points.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numba
import numpy as np

from .errors import EmptySelectionError, ParameterError
from .volume import BinaryMask, GridGeometry, ScalarVolume, check_compatible, percentile


@dataclass(frozen=True)
class SeedSet:
    """Deduplicated, lexicographically sorted voxel indices on a grid."""

    voxels: np.ndarray
    geometry: GridGeometry

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.int64).reshape(-1, 3)
        if len(vox):
            vox = np.unique(vox, axis=0)
            if (vox < 0).any() or (vox >= np.asarray(self.geometry.dims)).any():
                raise ParameterError("seed index outside grid")
        vox.setflags(write=False)
        object.__setattr__(self, "voxels", vox)

    def __len__(self):
        return len(self.voxels)

    def to_mask(self) -> BinaryMask:
        m = np.zeros(self.geometry.dims, dtype=np.uint8)
        if len(self.voxels):
            m[tuple(self.voxels.T)] = 1
        return BinaryMask(m, self.geometry)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# dims=%d,%d,%d\n" % self.geometry.dims)
            w = csv.writer(fh)
            w.writerow(["i", "j", "k"])
            w.writerows(self.voxels.tolist())

    @classmethod
    def read_csv(cls, path, geometry: GridGeometry | None = None) -> SeedSet:
        with open(path, newline="") as fh:
            first = fh.readline().strip()
            if not first.startswith("# dims="):
                raise ParameterError(f"{path}: missing '# dims=' header line")
            dims = tuple(int(x) for x in first[len("# dims="):].split(","))
            rows = list(csv.DictReader(fh))
        vox = np.array([[int(r["i"]), int(r["j"]), int(r["k"])] for r in rows], dtype=np.int64)
        if geometry is None:
            geometry = GridGeometry.from_spacing(dims)
        elif geometry.dims != dims:
            raise ParameterError(f"{path}: seeds recorded for dims {dims}, grid is {geometry.dims}")
        return cls(vox.reshape(-1, 3), geometry)


def binarize(vsp: ScalarVolume, threshold: float = 0.2) -> BinaryMask:
    """Vessel mask: voxels strictly above ``threshold``."""
    return BinaryMask((vsp.data > threshold).astype(np.uint8), vsp.geometry)


# ---------------------------------------------------------------- topology tables

# 3x3x3 neighbourhood positions are numbered p = 9*(dx+1) + 3*(dy+1) + (dz+1)
_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)


def _adjacency(max_l1):
    """Neighbour lists within the 3x3x3 cube for a given adjacency."""
    table = np.full((27, 26), -1, dtype=np.int64)
    for p, a in enumerate(_OFFSETS):
        n = 0
        for q, b in enumerate(_OFFSETS):
            d = np.abs(a - b)
            if p != q and d.max() == 1 and d.sum() <= max_l1:
                table[p, n] = q
                n += 1
    return table


_ADJ26 = _adjacency(3)
_ADJ6 = _adjacency(1)
_N18 = np.array([np.abs(o).sum() <= 2 for o in _OFFSETS])
_N6 = np.array([np.abs(o).sum() == 1 for o in _OFFSETS])


def _octant_tables():
    """Euler-change lookup for each 2x2x2 octant around the centre voxel.

    For octant corner (sx, sy, sz) the member voxels are offsets in
    {0,sx} x {0,sy} x {0,sz}; bit b of the configuration is voxel
    (b&1)*sx, (b>>1&1)*sy, (b>>2&1)*sz, bit 0 being the centre. The entry is
    8x the share of chi(with centre) - chi(without centre) carried by the
    octant's corner vertex, its three edges (1/2 each) and three faces (1/4
    each), plus 1/8 of the centre cube. Foreground cubes are closed, which
    is the cubical model of 26-connectivity. The eight entries sum to zero
    iff removing the centre preserves the Euler characteristic.
    """
    lut = np.zeros(256, dtype=np.int64)
    for cfg in range(256):
        if not cfg & 1:
            continue
        bits = [(cfg >> b) & 1 for b in range(8)]
        vertex = int(not any(bits[1:]))
        edges = (
            int(not (bits[2] or bits[4] or bits[6]))  # along x
            + int(not (bits[1] or bits[4] or bits[5]))  # along y
            + int(not (bits[1] or bits[2] or bits[3]))  # along z
        )
        faces = int(not bits[1]) + int(not bits[2]) + int(not bits[4])
        # removing the centre drops these cells: chi += -V + E - F + C
        lut[cfg] = -(-8 * vertex + 4 * edges - 2 * faces + 1)
    members = np.zeros((8, 8), dtype=np.int64)
    for o, (sx, sy, sz) in enumerate(itertools.product((-1, 1), repeat=3)):
        for b in range(8):
            dx, dy, dz = (b & 1) * sx, (b >> 1 & 1) * sy, (b >> 2 & 1) * sz
            members[o, b] = 9 * (dx + 1) + 3 * (dy + 1) + (dz + 1)
    return lut, members


EULER_LUT, _OCTANT_MEMBERS = _octant_tables()

# border directions in fixed order: U, D, N, S, E, W
BORDER_DIRECTIONS = np.array(
    [(0, 0, 1), (0, 0, -1), (0, 1, 0), (0, -1, 0), (1, 0, 0), (-1, 0, 0)], dtype=np.int64
)


@numba.njit(cache=True)
def _neighbourhood(img, i, j, k, out):
    nx, ny, nz = img.shape
    p = 0
    for dx in range(-1, 2):
        for dy in range(-1, 2):
            for dz in range(-1, 2):
                x, y, z = i + dx, j + dy, k + dz
                if 0 <= x < nx and 0 <= y < ny and 0 <= z < nz:
                    out[p] = img[x, y, z]
                else:
                    out[p] = 0
                p += 1


@numba.njit(cache=True)
def _euler_invariant(nb, lut, members):
    total = 0
    for o in range(8):
        cfg = 0
        for b in range(8):
            if nb[members[o, b]]:
                cfg |= 1 << b
        total += lut[cfg | 1]
    return total == 0


@numba.njit(cache=True)
def _count_components(present, adj, stack, label):
    """Number of connected components among positions with present[p]."""
    for p in range(27):
        label[p] = 0
    n = 0
    for p in range(27):
        if not present[p] or label[p]:
            continue
        n += 1
        label[p] = n
        top = 0
        stack[top] = p
        top += 1
        while top > 0:
            top -= 1
            q = stack[top]
            for m in range(26):
                r = adj[q, m]
                if r < 0:
                    break
                if present[r] and not label[r]:
                    label[r] = n
                    stack[top] = r
                    top += 1
    return n, label


@numba.njit(cache=True)
def _is_simple(nb, adj26, adj6, n18, n6, present, stack, label):
    # foreground: one 26-component in N26 without the centre
    for p in range(27):
        present[p] = nb[p] != 0 and p != 13
    nfg, _ = _count_components(present, adj26, stack, label)
    if nfg != 1:
        return False
    # background: one 6-component in N18 that is 6-adjacent to the centre
    for p in range(27):
        present[p] = nb[p] == 0 and n18[p] and p != 13
    _, lab = _count_components(present, adj6, stack, label)
    first = 0
    for p in range(27):
        if n6[p] and present[p]:
            if first == 0:
                first = lab[p]
            elif lab[p] != first:
                return False
    return first != 0


@numba.njit(cache=True)
def _n_neighbours(nb):
    c = 0
    for p in range(27):
        if p != 13 and nb[p]:
            c += 1
    return c


@numba.njit(cache=True)
def _thin_kernel(img, directions, lut, members, adj26, adj6, n18, n6):
    nx, ny, nz = img.shape
    nb = np.zeros(27, dtype=np.uint8)
    present = np.zeros(27, dtype=np.bool_)
    stack = np.zeros(27, dtype=np.int64)
    label = np.zeros(27, dtype=np.int64)
    cand = np.empty((img.size, 3), dtype=np.int64)
    changed = True
    while changed:
        changed = False
        for d in range(6):
            dx, dy, dz = directions[d, 0], directions[d, 1], directions[d, 2]
            nc = 0
            for i in range(nx):
                for j in range(ny):
                    for k in range(nz):
                        if not img[i, j, k]:
                            continue
                        x, y, z = i + dx, j + dy, k + dz
                        if 0 <= x < nx and 0 <= y < ny and 0 <= z < nz and img[x, y, z]:
                            continue  # not a border voxel in this direction
                        _neighbourhood(img, i, j, k, nb)
                        if _n_neighbours(nb) < 2:
                            continue
                        if not _euler_invariant(nb, lut, members):
                            continue
                        if not _is_simple(nb, adj26, adj6, n18, n6, present, stack, label):
                            continue
                        cand[nc, 0] = i
                        cand[nc, 1] = j
                        cand[nc, 2] = k
                        nc += 1
            for c in range(nc):
                i, j, k = cand[c, 0], cand[c, 1], cand[c, 2]
                _neighbourhood(img, i, j, k, nb)
                if _n_neighbours(nb) < 2:
                    continue
                if not _is_simple(nb, adj26, adj6, n18, n6, present, stack, label):
                    continue
                img[i, j, k] = 0
                changed = True
    return img


def thin3d(mask: BinaryMask) -> BinaryMask:
    """Reduce a binary mask to a one-voxel-wide, topology-preserving skeleton."""
    img = np.ascontiguousarray(mask.data, dtype=np.uint8).copy()
    out = _thin_kernel(
        img, BORDER_DIRECTIONS, EULER_LUT, _OCTANT_MEMBERS, _ADJ26, _ADJ6, _N18, _N6
    )
    return BinaryMask(out, mask.geometry)


def is_simple_point(neighbourhood) -> bool:
    """Simple-point test for a 3x3x3 array whose centre is foreground."""
    nb = np.ascontiguousarray(np.asarray(neighbourhood, dtype=np.uint8).ravel())
    return bool(
        _is_simple(
            nb, _ADJ26, _ADJ6, _N18, _N6,
            np.zeros(27, dtype=np.bool_), np.zeros(27, dtype=np.int64), np.zeros(27, dtype=np.int64),
        )
    )


def euler_invariant(neighbourhood) -> bool:
    nb = np.ascontiguousarray(np.asarray(neighbourhood, dtype=np.uint8).ravel())
    return bool(_euler_invariant(nb, EULER_LUT, _OCTANT_MEMBERS))


def euler_characteristic(data) -> int:
    """Euler characteristic of the union of closed unit cubes at foreground voxels.

    Counts V - E + F - C of the cubical complex; this is the topology seen
    by 26-connectivity of the foreground.
    """
    fg = np.asarray(data, dtype=bool)
    n = fg.shape
    padded = np.pad(fg, 1)

    def cells(spanned):
        # a cell is present if any incident cube is foreground; along a
        # spanned axis exactly one cube column is incident, else two
        fixed = [a for a in range(3) if a not in spanned]
        acc = np.zeros([n[a] if a in spanned else n[a] + 1 for a in range(3)], dtype=bool)
        for combo in itertools.product((0, 1), repeat=len(fixed)):
            shift = dict(zip(fixed, combo))
            sl = tuple(
                slice(1, 1 + n[a]) if a in spanned else slice(shift[a], shift[a] + n[a] + 1)
                for a in range(3)
            )
            acc |= padded[sl]
        return int(acc.sum())

    vertices = cells(())
    edges = sum(cells((a,)) for a in range(3))
    faces = sum(cells((a, b)) for a, b in ((0, 1), (0, 2), (1, 2)))
    return vertices - edges + faces - int(fg.sum())


def extract_seeds(
    skel: BinaryMask, vsp: ScalarVolume, q: float = 0.75, population: str = "skeleton"
) -> SeedSet:
    """Skeleton voxels whose VSP value is strictly above the ``q`` percentile.

    The percentile is taken over VSP values at skeleton voxels
    (``population="skeleton"``) or over the whole VSP volume
    (``population="volume"``).
    """
    check_compatible(skel, vsp)
    if not 0.0 <= q <= 1.0:
        raise ParameterError(f"q must lie in [0, 1], got {q}")
    on = skel.data.astype(bool)
    if not on.any():
        raise EmptySelectionError("skeleton has no foreground voxels")
    values = np.asarray(vsp.data, dtype=np.float64)
    if population == "skeleton":
        t = percentile(values[on], q)
    elif population == "volume":
        t = percentile(values, q)
    else:
        raise ParameterError(f"population must be 'skeleton' or 'volume', got {population!r}")
    pick = on & (values > t)
    if not pick.any():
        raise EmptySelectionError(
            f"no skeleton voxel exceeds the {q:g} percentile ({t:g}); try a lower quantile"
        )
    return SeedSet(np.argwhere(pick), skel.geometry)
