"""Differentiable bilinear sampling with zero padding outside the map."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import NumericError

# (dx, dy) of the four neighbors, and the sign of d(weight)/dx, d(weight)/dy
_CORNERS = ((0, 0, -1, -1), (1, 0, 1, -1), (0, 1, -1, 1), (1, 1, 1, 1))


def bilinear_sample(feature, coords) -> Node:
    """Sample per-head feature maps at continuous pixel coordinates.

    ``feature`` is (B, H, W, N, C'), ``coords`` is (B, num_windows, N, P, 2)
    holding (x, y) pixel positions. Neighbors outside [0, W-1] x [0, H-1]
    contribute zero. Returns (B, num_windows, N, P, C').

    At exact integer coordinates the coordinate gradient is taken from the
    cell to the right/below.
    """
    if not isinstance(feature, Node):
        feature = ad.const(feature)
    if not isinstance(coords, Node):
        coords = ad.const(coords, dtype=feature.dtype)
    b, h, w, n, cp = feature.shape
    if h < 1 or w < 1:
        raise ValueError(f"feature map must be at least 1x1, got {h}x{w}")
    cb, nw, cn, p, two = coords.shape
    if cb != b or cn != n or two != 2:
        raise ValueError(f"coords {coords.shape} incompatible with feature {feature.shape}")
    xy = coords.value
    if not np.isfinite(xy).all():
        raise NumericError("sampling coordinates contain NaN or inf")

    x, y = xy[..., 0], xy[..., 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = (x - x0).astype(feature.dtype)
    fy = (y - y0).astype(feature.dtype)
    # far-away points are invalid anyway; clip before the int cast
    x0 = np.clip(x0, -2, w + 1).astype(np.int64)
    y0 = np.clip(y0, -2, h + 1).astype(np.int64)

    flat = feature.value.reshape(b * h * w * n, cp)
    bi = np.arange(b).reshape(b, 1, 1, 1)
    hi = np.arange(n).reshape(1, 1, n, 1)
    wx = (1 - fx, fx)
    wy = (1 - fy, fy)

    idx, wts, vals = [], [], []
    out = np.zeros((b, nw, n, p, cp), dtype=feature.dtype)
    for dx, dy, _, _ in _CORNERS:
        xi, yi = x0 + dx, y0 + dy
        ok = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
        row = ((bi * h + np.clip(yi, 0, h - 1)) * w + np.clip(xi, 0, w - 1)) * n + hi
        v = flat[row] * ok[..., None]
        wgt = wx[dx] * wy[dy]
        out += wgt[..., None] * v
        idx.append(row)
        wts.append(wgt * ok)
        vals.append(v)

    def bw(g):
        gf = None
        if feature.requires_grad:
            gflat = np.zeros_like(flat)
            rows = np.concatenate([r.reshape(-1) for r in idx])
            contrib = np.concatenate([(wt[..., None] * g).reshape(-1, cp) for wt in wts])
            np.add.at(gflat, rows, contrib)
            gf = gflat.reshape(feature.shape)
        gc = None
        if coords.requires_grad:
            gx = np.zeros(x.shape, dtype=feature.dtype)
            gy = np.zeros(x.shape, dtype=feature.dtype)
            for k, (dx, dy, sx, sy) in enumerate(_CORNERS):
                dot = (vals[k] * g).sum(axis=-1)
                gx += sx * wy[dy] * dot
                gy += sy * wx[dx] * dot
            gc = np.stack([gx, gy], axis=-1).astype(coords.dtype, copy=False)
        return gf, gc

    return ad.record(out, (feature, coords), bw)
