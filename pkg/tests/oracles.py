"""Independent reference implementations used as test oracles.

Pure-Python loops, no shared code with the package.
"""

import math


def matmul3(a, b):
    return [[sum(a[i][k] * b[k][j] for k in range(3)) for j in range(3)] for i in range(3)]


def transform(t, beta1, beta2):
    """Scale @ shear @ rotation @ translation @ projection from nine reals."""
    c, s = math.cos(t[4]), math.sin(t[4])
    mats = [
        [[1 + t[0], 0, 0], [0, 1 + t[1], 0], [0, 0, 1]],
        [[1, t[2], 0], [t[3], 1, 0], [0, 0, 1]],
        [[c, -s, 0], [s, c, 0], [0, 0, 1]],
        [[1, 0, beta1 * t[5]], [0, 1, beta2 * t[6]], [0, 0, 1]],
        [[1, 0, 0], [0, 1, 0], [t[7], t[8], 1]],
    ]
    out = mats[0]
    for m in mats[1:]:
        out = matmul3(out, m)
    return out


def project(T, x, y, eps=1e-4):
    """Homogeneous map of a center-relative point; |z| clamped to eps."""
    hx = T[0][0] * x + T[0][1] * y + T[0][2]
    hy = T[1][0] * x + T[1][1] * y + T[1][2]
    hz = T[2][0] * x + T[2][1] * y + T[2][2]
    if abs(hz) < eps:
        hz = math.copysign(eps, hz) if hz != 0 else eps
    return hx / hz, hy / hz


def mean_pairwise_distance(queries, keys):
    total = sum(math.dist(q, k) for q in queries for k in keys)
    return total / (len(queries) * len(keys))
