"""Independent reference implementations used only by the tests.

None of these share code with the package paths they check.
"""

import itertools
from collections import deque

import numba
import numpy as np

# ---------------------------------------------------------------- eikonal


@numba.njit(cache=True)
def _local_solve(a, h, rhs):
    """Smallest T with sum(max(T - a_i, 0)^2 / h_i^2) = rhs^2.

    Enumerates every non-empty subset of axes, solves its quadratic and
    keeps the smallest root that lies above all of the subset's values.
    """
    best = np.inf
    for mask in range(1, 8):
        A = 0.0
        B = 0.0
        C = -rhs * rhs
        amax = -np.inf
        ok = True
        for i in range(3):
            if mask & (1 << i):
                if a[i] == np.inf:
                    ok = False
                    break
                w = 1.0 / (h[i] * h[i])
                A += w
                B -= 2.0 * a[i] * w
                C += a[i] * a[i] * w
                amax = max(amax, a[i])
        if not ok:
            continue
        disc = B * B - 4.0 * A * C
        if disc < 0:
            continue
        root = (-B + np.sqrt(disc)) / (2.0 * A)
        if root >= amax and root < best:
            best = root
    return best


@numba.njit(cache=True)
def fast_sweep(speed, fixed, fixed_val, h, tol=1e-9, max_iter=10000):
    """Gauss-Seidel sweeping over the 8 axis orderings until no voxel moves
    by more than ``tol``."""
    nx, ny, nz = speed.shape
    t = np.full(speed.shape, np.inf)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if fixed[i, j, k]:
                    t[i, j, k] = fixed_val[i, j, k]
    a = np.empty(3)
    for it in range(max_iter):
        change = 0.0
        for order in range(8):
            for ii in range(nx):
                i = ii if order & 1 else nx - 1 - ii
                for jj in range(ny):
                    j = jj if order & 2 else ny - 1 - jj
                    for kk in range(nz):
                        k = kk if order & 4 else nz - 1 - kk
                        if fixed[i, j, k]:
                            continue
                        a[0] = np.inf
                        if i > 0:
                            a[0] = t[i - 1, j, k]
                        if i < nx - 1:
                            a[0] = min(a[0], t[i + 1, j, k])
                        a[1] = np.inf
                        if j > 0:
                            a[1] = t[i, j - 1, k]
                        if j < ny - 1:
                            a[1] = min(a[1], t[i, j + 1, k])
                        a[2] = np.inf
                        if k > 0:
                            a[2] = t[i, j, k - 1]
                        if k < nz - 1:
                            a[2] = min(a[2], t[i, j, k + 1])
                        new = _local_solve(a, h, 1.0 / speed[i, j, k])
                        old = t[i, j, k]
                        if new < old:
                            if old == np.inf:
                                change = np.inf
                            else:
                                change = max(change, old - new)
                            t[i, j, k] = new
        if change <= tol:
            return t, it + 1
    return t, max_iter


def sweep_from_seeds(speed, seeds, spacing=(1.0, 1.0, 1.0)):
    fixed = np.zeros(speed.shape, dtype=np.bool_)
    fixed[tuple(np.asarray(seeds).T)] = True
    t, _ = fast_sweep(
        np.asarray(speed, dtype=np.float64), fixed, np.zeros(speed.shape), np.asarray(spacing, dtype=np.float64)
    )
    return t


# ---------------------------------------------------------------- diffusion


def dense_perona_malik_step(img, dt, kappa, spacing):
    """Voxel-by-voxel explicit update with zero-flux boundaries."""
    img = np.asarray(img, dtype=np.float64)
    out = np.empty_like(img)
    nx, ny, nz = img.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                c = img[i, j, k]
                total = 0.0
                for axis in range(3):
                    s2 = spacing[axis] ** 2
                    for step in (1, -1):
                        idx = [i, j, k]
                        idx[axis] += step
                        if not 0 <= idx[axis] < img.shape[axis]:
                            continue
                        d = img[tuple(idx)] - c
                        g = np.exp(-((abs(d) / kappa) ** 2))
                        total += g * d / s2
                out[i, j, k] = c + dt * total
    return out


# ---------------------------------------------------------------- topology


def _neighbour_offsets(connectivity):
    offs = []
    for d in itertools.product((-1, 0, 1), repeat=3):
        if d == (0, 0, 0):
            continue
        l1 = sum(abs(v) for v in d)
        if connectivity == 6 and l1 == 1 or connectivity == 18 and l1 <= 2 or connectivity == 26:
            offs.append(d)
    return offs


def count_components(mask, connectivity):
    """Breadth-first flood fill component count."""
    mask = np.asarray(mask, dtype=bool)
    seen = np.zeros_like(mask)
    offs = _neighbour_offsets(connectivity)
    n = 0
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        n += 1
        seen[start] = True
        q = deque([start])
        while q:
            p = q.popleft()
            for d in offs:
                r = (p[0] + d[0], p[1] + d[1], p[2] + d[2])
                if all(0 <= r[a] < mask.shape[a] for a in range(3)) and mask[r] and not seen[r]:
                    seen[r] = True
                    q.append(r)
    return n


def background_components(mask):
    """6-connected background components, the outside counted as one."""
    padded = np.pad(np.asarray(mask, dtype=bool), 1)
    return count_components(~padded, 6)


def euler_by_cells(mask):
    """Euler characteristic by explicitly enumerating cells of closed cubes."""
    cells = [set(), set(), set(), set()]
    for x, y, z in zip(*np.nonzero(np.asarray(mask, dtype=bool))):
        # a cell is an axis-aligned box [lo, hi] with hi - lo in {0, 1}^3
        for lo in itertools.product((0, 1), repeat=3):
            for span in itertools.product((0, 1), repeat=3):
                if any(lo[a] + span[a] > 1 for a in range(3)):
                    continue
                base = (x + lo[0], y + lo[1], z + lo[2])
                cells[sum(span)].add((base, span))
    return len(cells[0]) - len(cells[1]) + len(cells[2]) - len(cells[3])


def cycle_count(mask):
    """First Betti number from chi = b0 - b1 + b2 (cavities are b2)."""
    b0 = count_components(mask, 26)
    b2 = background_components(mask) - 1
    return b0 + b2 - euler_by_cells(mask)


# ---------------------------------------------------------------- statistics


def enumerated_ranks(values):
    """Average rank over every ordering that sorts ``values``."""
    x = list(values)
    n = len(x)
    acc = np.zeros(n)
    count = 0
    for perm in itertools.permutations(range(n)):
        if all(x[perm[m]] <= x[perm[m + 1]] for m in range(n - 1)):
            for rank, idx in enumerate(perm, start=1):
                acc[idx] += rank
            count += 1
    return acc / count


def pearson(a, b):
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    return float(a @ b / np.sqrt((a @ a) * (b @ b)))


def _attachment_cells(nb):
    """Cells of the centre cube's boundary shared with a neighbouring foreground cube."""
    nb = np.asarray(nb, dtype=bool).reshape(3, 3, 3)
    cells = set()
    for base in itertools.product((0, 1), repeat=3):
        for span in itertools.product((0, 1), repeat=3):
            if sum(span) == 3 or any(base[a] + span[a] > 1 for a in range(3)):
                continue
            for d in itertools.product((-1, 0, 1), repeat=3):
                if d == (0, 0, 0) or not nb[d[0] + 1, d[1] + 1, d[2] + 1]:
                    continue
                if all(d[a] == 0 if span[a] else d[a] in (base[a] - 1, base[a]) for a in range(3)):
                    cells.add((base, span))
                    break
    return cells


def simple_by_attachment(nb):
    """A voxel is simple iff its attachment set is non-empty and contractible.

    On the boundary sphere of a cube that means connected with Euler
    characteristic one.
    """
    cells = _attachment_cells(nb)
    if not cells:
        return False
    chi = sum((-1) ** sum(span) for _, span in cells)
    if chi != 1:
        return False
    # connectivity through vertices: every cell is joined to its corner vertices
    parent = {}

    def find(x):
        while parent.setdefault(x, x) != x:
            x = parent[x]
        return x

    for base, span in cells:
        corners = [
            tuple(base[a] + (o[a] if span[a] else 0) for a in range(3))
            for o in itertools.product((0, 1), repeat=3)
        ]
        for c in corners:
            parent[find(c)] = find(corners[0])
    verts = {v for v in parent}
    return len({find(v) for v in verts}) == 1
