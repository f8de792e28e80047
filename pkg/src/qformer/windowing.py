"""Non-overlapping window partition of channel-last feature maps.

Pixel (row r, col c) sits at (x=c, y=r): x grows rightward, y downward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node


@dataclass(frozen=True)
class WindowGrid:
    """Windows of shape (B, num_windows, w*w, C), tokens row-major inside a window."""

    windows: Node
    grid_h: int
    grid_w: int
    pad_h: int
    pad_w: int
    w: int

    @property
    def num_windows(self):
        return self.grid_h * self.grid_w

    @property
    def padded_hw(self):
        return self.grid_h * self.w, self.grid_w * self.w


@dataclass(frozen=True)
class WindowCenters:
    """Window centers, ``xy`` of shape (num_windows, 2), row-major over the grid."""

    xy: np.ndarray
    grid_h: int
    grid_w: int
    w: int


def padding_for(h: int, w_: int, window: int) -> tuple[int, int]:
    return (-h) % window, (-w_) % window


def partition(x, w: int) -> WindowGrid:
    """Split a (B, H, W, C) map into w x w windows, zero-padding bottom/right."""
    if w < 1:
        raise ValueError(f"window size must be >= 1, got {w}")
    if not isinstance(x, Node):
        x = ad.const(x)
    b, h, wd, c = x.shape
    ph, pw = padding_for(h, wd, w)
    x = ad.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)))
    gh, gw = (h + ph) // w, (wd + pw) // w
    t = ad.reshape(x, (b, gh, w, gw, w, c))
    t = ad.transpose(t, (0, 1, 3, 2, 4, 5))
    return WindowGrid(ad.reshape(t, (b, gh * gw, w * w, c)), gh, gw, ph, pw, w)


def merge(g: WindowGrid, h: int, w_: int) -> Node:
    """Inverse of :func:`partition`; strips the padding."""
    ph, pw = padding_for(h, w_, g.w)
    if (ph, pw) != (g.pad_h, g.pad_w) or (h + ph, w_ + pw) != g.padded_hw:
        raise ValueError(
            f"window grid {g.grid_h}x{g.grid_w} (w={g.w}, pad {g.pad_h},{g.pad_w}) "
            f"is inconsistent with a {h}x{w_} map")
    win = g.windows
    b, n, m, c = win.shape
    if n != g.num_windows or m != g.w * g.w:
        raise ValueError(f"windows tensor {win.shape} does not match grid metadata")
    t = ad.reshape(win, (b, g.grid_h, g.grid_w, g.w, g.w, c))
    t = ad.transpose(t, (0, 1, 3, 2, 4, 5))
    t = ad.reshape(t, (b, g.grid_h * g.w, g.grid_w * g.w, c))
    if ph or pw:
        t = ad.getitem(t, (slice(None), slice(0, h), slice(0, w_)))
    return t


def centers(h: int, w_: int, w: int) -> WindowCenters:
    """Window centers for the padded grid covering an h x w_ map."""
    ph, pw = padding_for(h, w_, w)
    gh, gw = (h + ph) // w, (w_ + pw) // w
    half = (w - 1) / 2.0
    gy, gx = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    xy = np.stack([gx * w + half, gy * w + half], axis=-1).reshape(-1, 2).astype(np.float64)
    return WindowCenters(xy, gh, gw, w)


def relative_offsets(w: int) -> np.ndarray:
    """Token offsets from the window center, (w*w, 2) as (x, y), row-major."""
    half = (w - 1) / 2.0
    ry, rx = np.meshgrid(np.arange(w) - half, np.arange(w) - half, indexing="ij")
    return np.stack([rx, ry], axis=-1).reshape(-1, 2)


def base_coords(h: int, w_: int, w: int) -> np.ndarray:
    """Absolute token coordinates per window, (num_windows, w*w, 2)."""
    c = centers(h, w_, w)
    return c.xy[:, None, :] + relative_offsets(w)[None]
