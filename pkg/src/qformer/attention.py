"""Multi-head window attention and quadrangle attention."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .quad import RegConfig, build_transform, predict_params, project_coords, reg_loss
from .sampling import bilinear_sample
from .windowing import WindowGrid, centers, merge, padding_for, partition


@dataclass
class AttentionWeights:
    """Projection weights (in, out) plus the optional bias table / quadrangle head."""

    num_heads: int
    q_w: Node
    q_b: Node
    k_w: Node
    k_b: Node
    v_w: Node
    v_b: Node
    o_w: Node
    o_b: Node
    rel_pos: Node | None = None
    quad_w: Node | None = None
    quad_b: Node | None = None

    @property
    def dim(self):
        return self.q_w.shape[0]

    def named(self) -> dict[str, Node]:
        names = ["q_w", "q_b", "k_w", "k_b", "v_w", "v_b", "o_w", "o_b",
                 "rel_pos", "quad_w", "quad_b"]
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}


@dataclass
class AttentionOutput:
    features: Node
    quad_coords: Node | None = None
    attn_probs: np.ndarray | None = None
    reg: Node | None = None
    transforms: np.ndarray | None = None
    surrogate: np.ndarray | None = None


def init_attention(dim: int, num_heads: int, window: int, rng: np.random.Generator,
                   kind: str = "window", dtype=np.float64, std: float = 0.02) -> AttentionWeights:
    """Random projections; rel-pos table for ``window``, zero quad head for ``quadrangle``."""
    if dim % num_heads:
        raise ValueError(f"channels {dim} not divisible by {num_heads} heads")

    def lin():
        w = ad.param(rng.normal(0.0, std, (dim, dim)).astype(dtype))
        return w, ad.param(np.zeros(dim, dtype=dtype))

    (qw, qb), (kw, kb), (vw, vb), (ow, ob) = lin(), lin(), lin(), lin()
    weights = AttentionWeights(num_heads, qw, qb, kw, kb, vw, vb, ow, ob)
    if kind == "window":
        weights.rel_pos = ad.param(np.zeros(((2 * window - 1) ** 2, num_heads), dtype=dtype))
    elif kind == "quadrangle":
        weights.quad_w = ad.param(np.zeros((9 * num_heads, dim), dtype=dtype))
        weights.quad_b = ad.param(np.zeros(9 * num_heads, dtype=dtype))
    else:
        raise ValueError(f"unknown attention kind {kind!r}")
    return weights


def relative_position_index(w: int) -> np.ndarray:
    """(w*w, w*w) index into a (2w-1)^2 bias table for each query/key pair."""
    ys, xs = np.meshgrid(np.arange(w), np.arange(w), indexing="ij")
    ys, xs = ys.reshape(-1), xs.reshape(-1)
    dy = ys[:, None] - ys[None, :] + w - 1
    dx = xs[:, None] - xs[None, :] + w - 1
    return dy * (2 * w - 1) + dx


def _split_heads(t: Node, n: int) -> Node:
    b, nw, m, c = t.shape
    return ad.transpose(ad.reshape(t, (b, nw, m, n, c // n)), (0, 1, 3, 2, 4))


def _join_heads(t: Node) -> Node:
    b, nw, n, m, cp = t.shape
    return ad.reshape(ad.transpose(t, (0, 1, 3, 2, 4)), (b, nw, m, n * cp))


def _attend(q: Node, k: Node, v: Node, bias: Node | None):
    cp = q.shape[-1]
    logits = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / np.sqrt(cp))
    if bias is not None:
        logits = ad.add(logits, bias)
    probs = ad.softmax(logits, axis=-1)
    return ad.matmul(probs, v), probs


def _check(x: Node, weights: AttentionWeights):
    c = x.shape[-1]
    if c % weights.num_heads:
        raise ValueError(f"channels {c} not divisible by {weights.num_heads} heads")
    if weights.dim != c:
        raise ValueError(f"attention weights expect {weights.dim} channels, got {c}")


def _qkv(x: Node, weights: AttentionWeights, w: int):
    _, h, wd, _ = x.shape
    ph, pw = padding_for(h, wd, w)
    xp = ad.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)))
    q = ad.linear(xp, weights.q_w, weights.q_b)
    k = ad.linear(xp, weights.k_w, weights.k_b)
    v = ad.linear(xp, weights.v_w, weights.v_b)
    return xp, q, k, v


def _finish(out_heads: Node, grid, h: int, wd: int, weights: AttentionWeights) -> Node:
    g = WindowGrid(_join_heads(out_heads), grid.grid_h, grid.grid_w, grid.pad_h, grid.pad_w, grid.w)
    # grid was built on the already padded map
    y = merge(g, grid.grid_h * grid.w, grid.grid_w * grid.w)
    y = ad.getitem(y, (slice(None), slice(0, h), slice(0, wd)))
    return ad.linear(y, weights.o_w, weights.o_b)


def window_attention(x: Node, weights: AttentionWeights, w: int, use_bias: bool = True,
                     return_probs: bool = False) -> AttentionOutput:
    """Scaled dot-product attention inside each w x w window.

    The relative-position bias, when present and ``use_bias`` is set, is
    added to the logits before the softmax.
    """
    _check(x, weights)
    _, h, wd, _ = x.shape
    n = weights.num_heads
    _, q, k, v = _qkv(x, weights, w)
    gq = partition(q, w)
    qh = _split_heads(gq.windows, n)
    kh = _split_heads(partition(k, w).windows, n)
    vh = _split_heads(partition(v, w).windows, n)
    bias = None
    if use_bias and weights.rel_pos is not None:
        idx = relative_position_index(w)
        bias = ad.transpose(ad.take(weights.rel_pos, idx, axis=0), (2, 0, 1))
    out, probs = _attend(qh, kh, vh, bias)
    return AttentionOutput(_finish(out, gq, h, wd, weights),
                           attn_probs=probs.value if return_probs else None)


def quadrangle_attention(x: Node, weights: AttentionWeights, w: int, reg: RegConfig,
                         return_probs: bool = False, freeze_quad: bool = False) -> AttentionOutput:
    """Window queries attend to keys/values resampled on learned quadrangles.

    With ``freeze_quad`` the surrogate parameters are pinned to zero (identity
    transforms), which reduces the layer to window attention without bias.
    """
    _check(x, weights)
    if weights.quad_w is None:
        raise ValueError("quadrangle attention needs quad_w/quad_b weights")
    b, h, wd, c = x.shape
    n = weights.num_heads
    xp, q, k, v = _qkv(x, weights, w)
    hp, wp = xp.shape[1], xp.shape[2]
    gq = partition(q, w)
    qh = _split_heads(gq.windows, n)

    if freeze_quad:
        t = ad.const(np.zeros((b, gq.num_windows, n, 9), dtype=x.dtype))
    else:
        t = predict_params(partition(xp, w), weights.quad_w, weights.quad_b, n)
    T = build_transform(t, wp / w, hp / w)
    coords = project_coords(T, centers(hp, wp, w), w)

    cp = c // n
    kv = ad.concat([ad.reshape(k, (b, hp, wp, n, cp)), ad.reshape(v, (b, hp, wp, n, cp))], axis=-1)
    sampled = bilinear_sample(kv, coords)
    ks = ad.getitem(sampled, (Ellipsis, slice(0, cp)))
    vs = ad.getitem(sampled, (Ellipsis, slice(cp, 2 * cp)))
    out, probs = _attend(qh, ks, vs, None)
    return AttentionOutput(
        _finish(out, gq, h, wd, weights),
        quad_coords=coords,
        attn_probs=probs.value if return_probs else None,
        reg=reg_loss(coords, hp, wp, reg),
        transforms=T.value,
        surrogate=t.value,
    )


def cpe(x: Node, dw_weight: Node, dw_bias: Node | None = None) -> Node:
    """Conditional position embedding: x + depthwise_conv(x)."""
    return ad.add(x, ad.depthwise_conv2d(x, dw_weight, dw_bias))
