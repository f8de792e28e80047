"""Quadrangle geometry export and attention-distance statistics."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .model import QFormer
from .quad import project_points
from .windowing import base_coords, centers


def corner_offsets(w: int) -> np.ndarray:
    """Window boundary corners relative to the center: TL, TR, BR, BL."""
    r = w / 2.0
    return np.array([[-r, -r], [r, -r], [r, r], [-r, r]])


def quad_records(model: QFormer, image: np.ndarray) -> list[dict]:
    """Per layer/head/window geometry for a single image."""
    x = np.asarray(image, dtype=model.dtype)
    if x.ndim == 2:
        x = x[..., None]
    _, aux = model.forward(x[None])
    out = []
    for layer in aux["layers"]:
        T = layer["transforms"]
        if T is None:
            continue
        w = layer["window"]
        h, wd = layer["hw"]
        hp, wp = -(-h // w) * w, -(-wd // w) * w
        cen = centers(hp, wp, w).xy
        t = layer["surrogate"][0]
        cx, cy = project_points(ad.const(T[0]), corner_offsets(w))
        cx, cy = cx.value, cy.value
        for win in range(T.shape[1]):
            for head in range(T.shape[2]):
                out.append({
                    "layer": layer["name"], "stage": layer["stage"], "block": layer["block"],
                    "head": head, "window": win, "stride": layer["stride"],
                    "center": cen[win].tolist(),
                    "T": T[0, win, head].tolist(),
                    "corners": [[float(cx[win, head, k] + cen[win, 0]),
                                 float(cy[win, head, k] + cen[win, 1])] for k in range(4)],
                    "scale": [float(t[win, head, 0] + 1), float(t[win, head, 1] + 1)],
                    "rotation": float(t[win, head, 4]),
                })
    return out


def scale_factor_summary(model: QFormer, images: np.ndarray, batch_size: int = 128) -> list[dict]:
    """Mean learned scale factors (t1+1, t2+1) per layer and head over a set of images."""
    sums: dict[str, np.ndarray] = {}
    count = 0
    for start in range(0, len(images), batch_size):
        xb = np.asarray(images[start:start + batch_size], dtype=model.dtype)
        _, aux = model.forward(xb)
        for layer in aux["layers"]:
            t = layer["surrogate"]
            if t is None:
                continue
            s = (t[..., :2] + 1.0).sum(axis=(0, 1))
            sums[layer["name"]] = sums.get(layer["name"], 0) + s
        count += len(xb)
    out = []
    for layer in aux["layers"]:
        if layer["name"] not in sums:
            continue
        nwin = layer["surrogate"].shape[1]
        mean = sums[layer["name"]] / (count * nwin)
        for head in range(mean.shape[0]):
            out.append({"layer": layer["name"], "head": head,
                        "scale_x": float(mean[head, 0]), "scale_y": float(mean[head, 1])})
    return out


def attention_distance(probs: np.ndarray, query_xy: np.ndarray, key_xy: np.ndarray) -> np.ndarray:
    """Probability-weighted query-key distance for every query.

    ``probs`` is (..., Q, K); ``query_xy`` broadcasts to (..., Q, 2) and
    ``key_xy`` to (..., K, 2). Returns (..., Q).
    """
    diff = np.asarray(query_xy)[..., :, None, :] - np.asarray(key_xy)[..., None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1))
    return (probs * dist).sum(axis=-1)


def layer_attention_distances(model: QFormer, images: np.ndarray, batch_size: int = 64) -> list[dict]:
    """Per-layer mean and std of attention distance over a set of images.

    Key positions are the sampled quadrangle coordinates for QA layers and
    the window lattice otherwise. Distances are in token-grid units and,
    scaled by the layer stride, in input pixels.
    """
    per_layer: dict[str, list[np.ndarray]] = {}
    meta = {}
    for start in range(0, len(images), batch_size):
        xb = np.asarray(images[start:start + batch_size], dtype=model.dtype)
        _, aux = model.forward(xb, return_probs=True)
        for layer in aux["layers"]:
            w = layer["window"]
            h, wd = layer["hw"]
            hp, wp = -(-h // w) * w, -(-wd // w) * w
            q = base_coords(hp, wp, w)[None, :, None]          # (1, nW, 1, M, 2)
            k = layer["quad_coords"] if layer["quad_coords"] is not None else q
            d = attention_distance(layer["attn_probs"], q, k)  # (B, nW, N, M)
            per_layer.setdefault(layer["name"], []).append(d.reshape(d.shape[0], -1))
            meta[layer["name"]] = layer
    out = []
    for name, chunks in per_layer.items():
        d = np.concatenate(chunks, axis=0)
        per_image = d.mean(axis=1)
        stride = meta[name]["stride"]
        out.append({
            "layer": name, "stride": stride,
            "mean": float(per_image.mean()), "std": float(d.std()),
            "mean_px": float(per_image.mean() * stride), "std_px": float(d.std() * stride),
            "window_bound": float((meta[name]["window"] - 1) * np.sqrt(2)),
        })
    return out
