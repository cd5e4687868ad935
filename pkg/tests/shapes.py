"""Fixed binary shapes for thinning tests."""

import numpy as np


def bar(n=24):
    m = np.zeros((11, 11, n), dtype=np.uint8)
    m[3:8, 3:8, 2:-2] = 1
    return m


def l_shape(n=24):
    m = np.zeros((n, 11, n), dtype=np.uint8)
    m[3:7, 3:7, 3:-3] = 1
    m[3:-3, 3:7, -7:-3] = 1
    return m


def loop(n=28, r_major=8.0, r_minor=2.5):
    c = (n - 1) / 2.0
    i, j, k = np.indices((n, n, 11), dtype=np.float64)
    rho = np.hypot(i - c, j - c)
    return ((rho - r_major) ** 2 + (k - 5) ** 2 <= r_minor**2).astype(np.uint8)


def two_tubes(n=24):
    i, j, k = np.indices((n, 16, n), dtype=np.float64)
    a = (i - 5) ** 2 + (j - 5) ** 2 <= 2.5**2
    b = (k - 12) ** 2 + (j - 11) ** 2 <= 2.5**2
    m = a | b
    m[:, :, :2] = m[:, :, -2:] = False
    m[:2] = m[-2:] = False
    return m.astype(np.uint8)


SUITE = {"bar": bar, "l_shape": l_shape, "loop": loop, "two_tubes": two_tubes}
