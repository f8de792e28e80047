"""Quadrangle generation: surrogate parameters -> projective matrix -> coordinates.

Each (window, head) pair gets nine unconstrained reals ``t``. They parametrize
five elementary 3x3 transforms (scale, shear, rotation, translation,
projection) whose product maps the base window's center-relative token
offsets onto a quadrangle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ConfigError
from .windowing import WindowCenters, WindowGrid, relative_offsets

LEAKY_SLOPE = 0.01
Z_EPS = 1e-4


@dataclass(frozen=True)
class RegConfig:
    lam: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ConfigError(f"regularization weight must be >= 0, got {self.lam}")


def predict_params(x_windows, weight: Node, bias: Node | None, num_heads: int,
                   slope: float = LEAKY_SLOPE) -> Node:
    """Average-pool each window, LeakyReLU, then a 1x1 conv to 9 values per head.

    ``x_windows`` is a :class:`WindowGrid` or a (B, num_windows, w*w, C) node;
    ``weight`` is the (9*num_heads, C) conv kernel. Returns (B, num_windows, N, 9).
    """
    win = x_windows.windows if isinstance(x_windows, WindowGrid) else x_windows
    b, nw, _, c = win.shape
    if weight.shape != (9 * num_heads, c):
        raise ValueError(
            f"quadrangle head weight must be {(9 * num_heads, c)}, got {weight.shape}")
    pooled = ad.mean(win, axis=2)
    t = ad.conv1x1(ad.leaky_relu(pooled, slope), weight, bias)
    return ad.reshape(t, (b, nw, num_heads, 9))


def _matrix(entries) -> Node:
    """Assemble a (..., 3, 3) node from nine row-major entries."""
    m = ad.stack(entries, axis=-1)
    return ad.reshape(m, m.shape[:-1] + (3, 3))


def elementary_transforms(t: Node, beta1: float, beta2: float) -> list[Node]:
    """Scale, shear, rotation, translation and projection matrices, in order."""
    tk = [ad.getitem(t, (Ellipsis, k)) for k in range(9)]
    c5, s5 = ad.cos(tk[4]), ad.sin(tk[4])
    return [
        _matrix([tk[0] + 1.0, 0, 0, 0, tk[1] + 1.0, 0, 0, 0, 1]),
        _matrix([1, tk[2], 0, tk[3], 1, 0, 0, 0, 1]),
        _matrix([c5, -s5, 0, s5, c5, 0, 0, 0, 1]),
        _matrix([1, 0, ad.scale(tk[5], beta1), 0, 1, ad.scale(tk[6], beta2), 0, 0, 1]),
        _matrix([1, 0, 0, 0, 1, 0, tk[7], tk[8], 1]),
    ]


def build_transform(t, beta1: float, beta2: float) -> Node:
    """Compose T = T_scale @ T_shear @ T_rot @ T_trans @ T_proj for each ``t`` (..., 9)."""
    if not isinstance(t, Node):
        t = ad.const(t)
    if t.shape[-1] != 9:
        raise ValueError(f"surrogate parameters need a trailing axis of 9, got {t.shape}")
    mats = elementary_transforms(t, beta1, beta2)
    out = mats[0]
    for m in mats[1:]:
        out = ad.matmul(out, m)
    return out


def project_points(T: Node, rel_xy: np.ndarray, z_eps: float = Z_EPS) -> tuple[Node, Node]:
    """Map center-relative points (P, 2) through T (..., 3, 3); returns x, y of shape (..., P)."""
    homog = np.concatenate([rel_xy.T, np.ones((1, rel_xy.shape[0]))], axis=0).astype(T.dtype)
    p = ad.matmul(T, ad.const(homog))
    inv_z = ad.safe_reciprocal(ad.getitem(p, (Ellipsis, 2, slice(None))), z_eps)
    x = ad.mul(ad.getitem(p, (Ellipsis, 0, slice(None))), inv_z)
    y = ad.mul(ad.getitem(p, (Ellipsis, 1, slice(None))), inv_z)
    return x, y


def project_coords(T: Node, centers: WindowCenters, w: int) -> Node:
    """Quadrangle token coordinates in absolute pixels.

    ``T`` is (B, num_windows, N, 3, 3). Points are transformed relative to
    their window center, then shifted back. Returns (B, num_windows, N, w*w, 2).
    """
    if T.shape[1] != centers.xy.shape[0]:
        raise ValueError(f"{T.shape[1]} transforms for {centers.xy.shape[0]} windows")
    x, y = project_points(T, relative_offsets(w))
    cx = centers.xy[:, 0].astype(T.dtype)[:, None, None]
    cy = centers.xy[:, 1].astype(T.dtype)[:, None, None]
    return ad.stack([ad.add(x, cx), ad.add(y, cy)], axis=-1)


def normalize_coords(xy, h: int, w: int):
    """Pixel coordinates to [-1, 1] over the map extent (x by width, y by height)."""
    sx = 2.0 / max(w - 1, 1)
    sy = 2.0 / max(h - 1, 1)
    return xy * np.array([sx, sy]) - 1.0


def penalty(u: np.ndarray, lam: float) -> np.ndarray:
    """R(u): -lam below -1, +lam above 1, zero inside."""
    return np.where(u > 1, lam, np.where(u < -1, -lam, 0.0)).astype(np.asarray(u).dtype)


def reg_loss(coords: Node, h: int, w: int, cfg: RegConfig) -> Node:
    """Out-of-map penalty: sum of R(u) * u over every normalized coordinate.

    Summed per image and averaged over the batch (leading) axis. R is a
    constant in the backward pass, so d/du = R(u).
    """
    if not isinstance(cfg, RegConfig):
        cfg = RegConfig(float(cfg))
    scale_ = np.array([2.0 / max(w - 1, 1), 2.0 / max(h - 1, 1)], dtype=coords.dtype)
    u = ad.add(ad.mul(coords, scale_), coords.dtype.type(-1.0))
    r = penalty(u.value, cfg.lam)
    per_image = ad.sum(ad.mul(u, r))
    return ad.scale(per_image, 1.0 / coords.shape[0])
