"""Multi-source fast marching for |grad T| = 1/F on a 3D grid.

The solver uses the first-order Godunov upwind update on the 6-neighbourhood
with per-axis spacing, FAR/TRIAL/ACCEPTED labels and a binary min-heap with
decrease-key. Heap ties are broken by flat C-order index, i.e. by
lexicographic (i, j, k), so results do not depend on insertion order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .errors import ParameterError, ValidationError
from .vesselseg import SeedSet
from .volume import BinaryMask, ScalarVolume, check_compatible

DEFAULT_EPSILON = 1e-3

FAR, TRIAL, ACCEPTED = 0, 1, 2


@dataclass(frozen=True)
class SpeedField:
    volume: ScalarVolume
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        d = self.volume.data
        if d.min() < self.epsilon or d.max() > 1.0:
            raise ParameterError(
                f"speed values must lie in [{self.epsilon}, 1], "
                f"got [{float(d.min())}, {float(d.max())}]"
            )

    @property
    def geometry(self):
        return self.volume.geometry


@dataclass(frozen=True)
class ArrivalMap:
    arrival: ScalarVolume
    reached: BinaryMask

    @property
    def geometry(self):
        return self.arrival.geometry


def build_speed(dsa: ScalarVolume, epsilon: float = DEFAULT_EPSILON) -> SpeedField:
    """Speed potential ``max(dsa, epsilon)``.

    DSA values are expected in [0, 1]; values above 1 are clipped.
    """
    if not 0.0 < epsilon < 1.0:
        raise ParameterError(f"epsilon must lie in (0, 1), got {epsilon}")
    data = np.clip(np.asarray(dsa.data, dtype=np.float64), epsilon, 1.0)
    return SpeedField(ScalarVolume(data, dsa.geometry), epsilon)


def _seed_array(seeds, dims) -> np.ndarray:
    vox = np.asarray(getattr(seeds, "voxels", seeds), dtype=np.int64).reshape(-1, 3)
    if len(vox) == 0:
        raise ValidationError("seed set is empty")
    bad = (vox < 0).any(axis=1) | (vox >= np.asarray(dims)).any(axis=1)
    if bad.any():
        raise ValidationError(
            f"seed {tuple(int(v) for v in vox[bad][0])} lies outside grid {tuple(dims)}"
        )
    return vox


# ---------------------------------------------------------------- kernels


@numba.njit(cache=True, inline="always")
def _less(t, idx, a, b):
    return t[a] < t[b] or (t[a] == t[b] and idx[a] < idx[b])


@numba.njit(cache=True)
def _sift_up(heap, pos, t, idx, n):
    item = heap[n]
    while n > 0:
        parent = (n - 1) >> 1
        p = heap[parent]
        if _less(t, idx, item, p):
            heap[n] = p
            pos[p] = n
            n = parent
        else:
            break
    heap[n] = item
    pos[item] = n


@numba.njit(cache=True)
def _sift_down(heap, pos, t, idx, n, size):
    item = heap[n]
    while True:
        child = 2 * n + 1
        if child >= size:
            break
        if child + 1 < size and _less(t, idx, heap[child + 1], heap[child]):
            child += 1
        c = heap[child]
        if _less(t, idx, c, item):
            heap[n] = c
            pos[c] = n
            n = child
        else:
            break
    heap[n] = item
    pos[item] = n


@numba.njit(cache=True)
def godunov_update(a0, a1, a2, h0, h1, h2, rhs):
    """Largest root of sum(((T - a_i)/h_i)^2) = rhs^2 over the valid axes.

    ``a_i`` is the smallest known neighbour value along axis i (inf if none).
    Axes are added in increasing ``a`` order while the running root exceeds
    the next ``a``.
    """
    if a1 < a0:
        a0, a1, h0, h1 = a1, a0, h1, h0
    if a2 < a1:
        a1, a2, h1, h2 = a2, a1, h2, h1
        if a1 < a0:
            a0, a1, h0, h1 = a1, a0, h1, h0
    A = 0.0
    B = 0.0
    C = -rhs * rhs
    t = np.inf
    for m in range(3):
        if m == 0:
            ai, hi = a0, h0
        elif m == 1:
            ai, hi = a1, h1
        else:
            ai, hi = a2, h2
        if ai == np.inf or t <= ai:
            break
        w = 1.0 / (hi * hi)
        A += w
        B += -2.0 * ai * w
        C += ai * ai * w
        disc = B * B - 4.0 * A * C
        if disc < 0.0:
            break
        t = (-B + math.sqrt(disc)) / (2.0 * A)
    return t


@numba.njit(cache=True)
def _fast_march_kernel(speed, preset_idx, preset_val, h0, h1, h2, record_order):
    nx, ny, nz = speed.shape
    n = nx * ny * nz
    t = np.full(n, np.inf)
    state = np.zeros(n, dtype=np.uint8)
    idx = np.arange(n)
    heap = np.empty(n, dtype=np.int64)
    pos = np.full(n, -1, dtype=np.int64)
    size = 0
    order = np.empty(n if record_order else 0, dtype=np.int64)
    n_acc = 0
    f = speed.ravel()
    fixed = np.zeros(n, dtype=np.bool_)

    for s in range(preset_idx.shape[0]):
        v = preset_idx[s]
        fixed[v] = True
        if state[v] == FAR:
            t[v] = preset_val[s]
            state[v] = TRIAL
            heap[size] = v
            _sift_up(heap, pos, t, idx, size)
            size += 1
        elif preset_val[s] < t[v]:
            t[v] = preset_val[s]
            _sift_up(heap, pos, t, idx, pos[v])

    strides = (ny * nz, nz, 1)
    while size > 0:
        v = heap[0]
        size -= 1
        if size > 0:
            heap[0] = heap[size]
            pos[heap[0]] = 0
            _sift_down(heap, pos, t, idx, 0, size)
        pos[v] = -1
        state[v] = ACCEPTED
        if record_order:
            order[n_acc] = v
        n_acc += 1

        k = v % nz
        j = (v // nz) % ny
        i = v // (ny * nz)
        for d in range(6):
            axis = d >> 1
            step = 1 if (d & 1) == 0 else -1
            if axis == 0:
                c = i + step
                lim = nx
            elif axis == 1:
                c = j + step
                lim = ny
            else:
                c = k + step
                lim = nz
            if c < 0 or c >= lim:
                continue
            u = v + step * strides[axis]
            if state[u] == ACCEPTED or fixed[u]:
                continue
            ui = u // (ny * nz)
            uj = (u // nz) % ny
            uk = u % nz
            # smallest accepted neighbour per axis
            ax = np.inf
            if ui > 0 and state[u - strides[0]] == ACCEPTED:
                ax = t[u - strides[0]]
            if ui < nx - 1 and state[u + strides[0]] == ACCEPTED:
                ax = min(ax, t[u + strides[0]])
            ay = np.inf
            if uj > 0 and state[u - strides[1]] == ACCEPTED:
                ay = t[u - strides[1]]
            if uj < ny - 1 and state[u + strides[1]] == ACCEPTED:
                ay = min(ay, t[u + strides[1]])
            az = np.inf
            if uk > 0 and state[u - strides[2]] == ACCEPTED:
                az = t[u - strides[2]]
            if uk < nz - 1 and state[u + strides[2]] == ACCEPTED:
                az = min(az, t[u + strides[2]])
            cand = godunov_update(ax, ay, az, h0, h1, h2, 1.0 / f[u])
            if cand < t[u]:
                t[u] = cand
                if state[u] == FAR:
                    state[u] = TRIAL
                    heap[size] = u
                    _sift_up(heap, pos, t, idx, size)
                    size += 1
                else:
                    _sift_up(heap, pos, t, idx, pos[u])
    return t.reshape(speed.shape), order[:n_acc] if record_order else order


def preset_times(speed: np.ndarray, seeds: np.ndarray, spacing, init_radius: float):
    """Fixed boundary data: 0 at seeds, and with ``init_radius > 0`` the
    straight-line time ``distance / F(seed)`` for voxels within
    ``init_radius`` mm of a seed (minimum over seeds).

    Returns flat C-order indices and values, sorted by index.
    """
    dims = speed.shape
    best = {}
    for s in seeds:
        best[int(np.ravel_multi_index(tuple(s), dims))] = 0.0
    if init_radius > 0:
        sp = np.asarray(spacing, dtype=np.float64)
        reach = np.floor(init_radius / sp + 1e-9).astype(np.int64)
        grids = np.meshgrid(*[np.arange(-r, r + 1) for r in reach], indexing="ij")
        offs = np.stack([g.ravel() for g in grids], axis=1)
        dist = np.sqrt(((offs * sp) ** 2).sum(axis=1))
        keep = dist <= init_radius + 1e-9
        offs, dist = offs[keep], dist[keep]
        for s in seeds:
            pts = offs + s
            ok = ((pts >= 0) & (pts < np.asarray(dims))).all(axis=1)
            flat = np.ravel_multi_index(tuple(pts[ok].T), dims)
            vals = dist[ok] / speed[tuple(s)]
            for v, val in zip(flat.tolist(), vals.tolist()):
                if val < best.get(v, np.inf):
                    best[v] = val
    order = sorted(best)
    return np.array(order, dtype=np.int64), np.array([best[v] for v in order], dtype=np.float64)


def fast_march(
    speed: SpeedField, seeds: SeedSet, init_radius: float = 0.0, return_order: bool = False
):
    """Arrival time from ``seeds`` (T = 0) through ``speed``.

    ``init_radius`` (mm, default 0) fixes voxels near each seed to their
    straight-line travel time before marching; this removes most of the
    first-order point-source error at the cost of assuming locally uniform
    speed. Returns an :class:`ArrivalMap` with float64 arrival times. With
    ``return_order=True`` also returns the flat C-order indices in
    acceptance order.
    """
    vol = getattr(speed, "volume", speed)
    if hasattr(seeds, "geometry"):
        check_compatible(vol, seeds.geometry)
    vox = _seed_array(seeds, vol.dims)
    f = np.ascontiguousarray(vol.data, dtype=np.float64)
    if not (f > 0).all():
        raise ParameterError("speed must be strictly positive everywhere")
    if init_radius < 0:
        raise ParameterError(f"init_radius must be >= 0, got {init_radius}")
    h = vol.spacing
    pidx, pval = preset_times(f, vox, h, init_radius)
    t, order = _fast_march_kernel(f, pidx, pval, h[0], h[1], h[2], return_order)
    result = ArrivalMap(
        ScalarVolume(t, vol.geometry),
        BinaryMask(np.isfinite(t).astype(np.uint8), vol.geometry),
    )
    if return_order:
        return result, order
    return result


def local_residual(arrival: np.ndarray, speed: np.ndarray, spacing, fixed) -> np.ndarray:
    """Re-solve every voxel not in ``fixed`` from its final neighbours.

    ``fixed`` is a boolean array of preset voxels (seeds). Returns
    ``|T_resolved - T|``, zero at preset voxels and at a converged solution.
    """
    t = np.asarray(arrival, dtype=np.float64)
    pad = np.pad(t, 1, constant_values=np.inf)
    mins = []
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        mins.append(np.minimum(pad[tuple(lo)], pad[tuple(hi)]))
    out = np.empty_like(t)
    h = tuple(float(s) for s in spacing)
    f = np.asarray(speed, dtype=np.float64)
    for ijk in np.ndindex(t.shape):
        out[ijk] = godunov_update(
            mins[0][ijk], mins[1][ijk], mins[2][ijk], h[0], h[1], h[2], 1.0 / f[ijk]
        )
    out[np.asarray(fixed, dtype=bool)] = t[np.asarray(fixed, dtype=bool)]
    return np.abs(out - t)


# ---------------------------------------------------------------- graph oracle


def _grid_edges(dims, spacing, connectivity):
    if connectivity == 6:
        offsets = [(1, 0, 0), (0, 1, 0), (0, 0, 1)]
    elif connectivity == 26:
        offsets = [
            (a, b, c)
            for a in (-1, 0, 1)
            for b in (-1, 0, 1)
            for c in (-1, 0, 1)
            if (a, b, c) > (0, 0, 0)
        ]
    else:
        raise ParameterError(f"connectivity must be 6 or 26, got {connectivity}")
    flat = np.arange(int(np.prod(dims))).reshape(dims)
    src, dst, length = [], [], []
    for off in offsets:
        a = [slice(max(0, -o), d - max(0, o)) for o, d in zip(off, dims)]
        b = [slice(max(0, o), d - max(0, -o)) for o, d in zip(off, dims)]
        src.append(flat[tuple(a)].ravel())
        dst.append(flat[tuple(b)].ravel())
        step = math.sqrt(sum((o * s) ** 2 for o, s in zip(off, spacing)))
        length.append(np.full(src[-1].size, step))
    return np.concatenate(src), np.concatenate(dst), np.concatenate(length)


def dijkstra_oracle(
    speed: SpeedField, seeds: SeedSet, connectivity: int = 6, weighting: str = "mean"
) -> ArrivalMap:
    """Shortest-path arrival on the voxel graph.

    ``weighting="mean"`` uses edge cost ``length * (1/F(u) + 1/F(v)) / 2``;
    ``"upwind"`` charges ``length / F(v)`` on entering ``v``, the cost the
    fast-marching update uses for a single upwind neighbour.
    """
    vol = getattr(speed, "volume", speed)
    dims = vol.dims
    if max(dims) > 64:
        raise ParameterError("dijkstra_oracle is limited to grids of at most 64^3")
    vox = _seed_array(seeds, dims)
    slow = 1.0 / np.asarray(vol.data, dtype=np.float64).ravel()
    src, dst, length = _grid_edges(dims, vol.spacing, connectivity)
    if weighting == "mean":
        w = length * 0.5 * (slow[src] + slow[dst])
        rows, cols, vals = np.concatenate([src, dst]), np.concatenate([dst, src]), np.concatenate([w, w])
    elif weighting == "upwind":
        rows = np.concatenate([src, dst])
        cols = np.concatenate([dst, src])
        vals = np.concatenate([length * slow[dst], length * slow[src]])
    else:
        raise ParameterError(f"unknown weighting {weighting!r}")
    n = slow.size
    graph = coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    sources = np.ravel_multi_index(vox.T, dims)
    t = dijkstra(graph, directed=True, indices=sources, min_only=True)
    t = t.reshape(dims)
    return ArrivalMap(
        ScalarVolume(t, vol.geometry),
        BinaryMask(np.isfinite(t).astype(np.uint8), vol.geometry),
    )
