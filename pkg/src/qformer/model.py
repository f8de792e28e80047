"""Micro-scale plain and hierarchical QFormer classifiers.

Every layer is ``X = Z + CPE(Z)`` followed by a pre-norm attention block and
a pre-norm MLP block. Hierarchical models downsample with 2x2 patch merging
between stages; plain models keep one token grid throughout.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .attention import AttentionWeights, cpe, init_attention, quadrangle_attention, window_attention
from .autodiff import Node
from .errors import ConfigError
from .quad import RegConfig

VARIANTS = ("hierarchical", "plain")
ATTENTIONS = ("quadrangle", "window")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "hierarchical"
    depths: tuple = (1, 1)
    channels: tuple = (16, 32)
    heads: tuple = (2, 4)
    mlp_ratio: float = 4.0
    window: int = 2
    patch_size: int = 4
    num_classes: int = 4
    in_chans: int = 1
    image_size: int = 32
    lam: float = 1.0
    attention: str = "quadrangle"
    cpe_kernel: int = 7

    def __post_init__(self):
        for name in ("depths", "channels", "heads"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        problems = self.problems()
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.variant not in VARIANTS:
            out.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.attention not in ATTENTIONS:
            out.append(f"attention must be one of {ATTENTIONS}, got {self.attention!r}")
        if not (len(self.depths) == len(self.channels) == len(self.heads)) or not self.depths:
            out.append("depths, channels and heads must be non-empty and of equal length")
        elif self.variant == "plain" and len(self.depths) != 1:
            out.append("plain variant has exactly one stage")
        for c, n in zip(self.channels, self.heads):
            if n < 1 or c < 1 or c % n:
                out.append(f"channels {c} not divisible by heads {n}")
        if any(d < 1 for d in self.depths):
            out.append("every stage needs depth >= 1")
        if not self.mlp_ratio > 0:
            out.append("mlp_ratio must be > 0")
        if self.window < 1:
            out.append("window must be >= 1")
        if self.patch_size < 1:
            out.append("patch_size must be >= 1")
        if self.num_classes < 2:
            out.append("num_classes must be >= 2")
        if self.in_chans < 1:
            out.append("in_chans must be >= 1")
        if self.cpe_kernel < 1 or self.cpe_kernel % 2 == 0:
            out.append("cpe_kernel must be a positive odd integer")
        if not np.isfinite(self.lam) or self.lam < 0:
            out.append("lam must be >= 0")
        if self.patch_size >= 1 and self.depths:
            total = self.patch_size * 2 ** (len(self.depths) - 1)
            if self.image_size % total:
                out.append(f"image_size {self.image_size} not divisible by total stride {total}")
        return out

    @property
    def num_stages(self):
        return len(self.depths)

    def stage_resolution(self, stage: int, image_size: int | None = None) -> int:
        return (image_size or self.image_size) // (self.patch_size * 2 ** stage)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("depths", "channels", "heads"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        return cls(**d)


PRESETS = {
    "qformer-micro-h": ModelConfig(),
    "qformer-micro-p": ModelConfig(variant="plain", depths=(4,), channels=(32,), heads=(4,)),
    "qformer-h-t": ModelConfig(depths=(2, 2, 6, 2), channels=(96, 192, 384, 768),
                               heads=(3, 6, 12, 24), window=7, image_size=224,
                               num_classes=1000, in_chans=3),
    "qformer-h-s": ModelConfig(depths=(2, 2, 18, 2), channels=(96, 192, 384, 768),
                               heads=(3, 6, 12, 24), window=7, image_size=224,
                               num_classes=1000, in_chans=3),
    "qformer-h-b": ModelConfig(depths=(2, 2, 18, 2), channels=(128, 256, 512, 1024),
                               heads=(4, 8, 16, 32), window=7, image_size=224,
                               num_classes=1000, in_chans=3),
    "qformer-p-b": ModelConfig(variant="plain", depths=(12,), channels=(768,), heads=(12,),
                               window=7, patch_size=16, image_size=224,
                               num_classes=1000, in_chans=3),
}
MICRO_PRESETS = ("qformer-micro-h", "qformer-micro-p")


def get_preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides) if overrides else cfg


def _block_prefixes(cfg: ModelConfig):
    for s, depth in enumerate(cfg.depths):
        for i in range(depth):
            yield s, i, f"stages.{s}.blocks.{i}"


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Name -> shape for every parameter, in checkpoint order."""
    shapes: dict[str, tuple] = {}
    p, c0 = cfg.patch_size, cfg.channels[0]
    shapes["patch_embed.weight"] = (p * p * cfg.in_chans, c0)
    shapes["patch_embed.bias"] = (c0,)
    shapes["patch_embed.norm.weight"] = (c0,)
    shapes["patch_embed.norm.bias"] = (c0,)
    k, w = cfg.cpe_kernel, cfg.window
    for s, depth in enumerate(cfg.depths):
        c, n = cfg.channels[s], cfg.heads[s]
        if s > 0:
            cin = cfg.channels[s - 1]
            shapes[f"stages.{s}.downsample.norm.weight"] = (4 * cin,)
            shapes[f"stages.{s}.downsample.norm.bias"] = (4 * cin,)
            shapes[f"stages.{s}.downsample.reduction.weight"] = (4 * cin, c)
        hidden = int(round(c * cfg.mlp_ratio))
        for i in range(depth):
            pre = f"stages.{s}.blocks.{i}"
            shapes[f"{pre}.cpe.weight"] = (k, k, c)
            shapes[f"{pre}.cpe.bias"] = (c,)
            shapes[f"{pre}.norm1.weight"] = (c,)
            shapes[f"{pre}.norm1.bias"] = (c,)
            for proj in ("q", "k", "v", "o"):
                shapes[f"{pre}.attn.{proj}_w"] = (c, c)
                shapes[f"{pre}.attn.{proj}_b"] = (c,)
            if cfg.attention == "window":
                shapes[f"{pre}.attn.rel_pos"] = ((2 * w - 1) ** 2, n)
            else:
                shapes[f"{pre}.attn.quad_w"] = (9 * n, c)
                shapes[f"{pre}.attn.quad_b"] = (9 * n,)
            shapes[f"{pre}.norm2.weight"] = (c,)
            shapes[f"{pre}.norm2.bias"] = (c,)
            shapes[f"{pre}.mlp.fc1.weight"] = (c, hidden)
            shapes[f"{pre}.mlp.fc1.bias"] = (hidden,)
            shapes[f"{pre}.mlp.fc2.weight"] = (hidden, c)
            shapes[f"{pre}.mlp.fc2.bias"] = (c,)
    cl = cfg.channels[-1]
    shapes["norm.weight"] = (cl,)
    shapes["norm.bias"] = (cl,)
    shapes["head.weight"] = (cl, cfg.num_classes)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


def _init_value(name: str, shape, rng, dtype, std=0.02):
    leaf = name.rsplit(".", 1)[-1]
    if name.endswith("norm.weight") or name.endswith(("norm1.weight", "norm2.weight")):
        return np.ones(shape, dtype=dtype)
    if leaf in ("bias", "rel_pos", "quad_w", "quad_b") or leaf.endswith("_b"):
        return np.zeros(shape, dtype=dtype)
    # truncated normal at two standard deviations
    v = rng.normal(0.0, std, shape)
    return np.clip(v, -2 * std, 2 * std).astype(dtype)


@dataclass
class QFormer:
    config: ModelConfig
    params: dict[str, Node] = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def num_parameters(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def attention_weights(self, prefix: str, num_heads: int) -> AttentionWeights:
        a = f"{prefix}.attn."
        get = self.params.get
        return AttentionWeights(
            num_heads, get(a + "q_w"), get(a + "q_b"), get(a + "k_w"), get(a + "k_b"),
            get(a + "v_w"), get(a + "v_b"), get(a + "o_w"), get(a + "o_b"),
            rel_pos=get(a + "rel_pos"), quad_w=get(a + "quad_w"), quad_b=get(a + "quad_b"))

    def astype(self, dtype) -> "QFormer":
        return QFormer(self.config, {k: ad.param(v.value.astype(dtype), name=k)
                                     for k, v in self.params.items()})

    def copy(self) -> "QFormer":
        return self.astype(self.dtype)

    # ------------------------------------------------------------- forward

    def features(self, images, *, return_probs=False, freeze_quad=False, use_bias=True):
        """Pooled final-stage features (B, C) plus the auxiliary record."""
        cfg, P = self.config, self.params
        x = images if isinstance(images, Node) else ad.const(np.asarray(images, dtype=self.dtype))
        if x.ndim == 3:
            x = ad.reshape(x, x.shape + (1,))
        b, h, w, cin = x.shape
        p = cfg.patch_size
        if cin != cfg.in_chans or h % (p * 2 ** (cfg.num_stages - 1)) or w % (p * 2 ** (cfg.num_stages - 1)):
            raise ValueError(f"input {x.shape} incompatible with config "
                             f"(in_chans={cfg.in_chans}, total stride {p * 2 ** (cfg.num_stages - 1)})")
        x = ad.reshape(x, (b, h // p, p, w // p, p, cin))
        x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
        x = ad.reshape(x, (b, h // p, w // p, p * p * cin))
        x = ad.linear(x, P["patch_embed.weight"], P["patch_embed.bias"])
        x = ad.layer_norm(x, P["patch_embed.norm.weight"], P["patch_embed.norm.bias"])

        reg_cfg = RegConfig(cfg.lam)
        reg_terms, layers = [], []
        stride = p
        for s, depth in enumerate(cfg.depths):
            if s > 0:
                x = _patch_merge(x, P, f"stages.{s}.downsample")
                stride *= 2
            n = cfg.heads[s]
            for i in range(depth):
                pre = f"stages.{s}.blocks.{i}"
                x = cpe(x, P[f"{pre}.cpe.weight"], P[f"{pre}.cpe.bias"])
                y = ad.layer_norm(x, P[f"{pre}.norm1.weight"], P[f"{pre}.norm1.bias"])
                weights = self.attention_weights(pre, n)
                if cfg.attention == "quadrangle":
                    out = quadrangle_attention(y, weights, cfg.window, reg_cfg,
                                               return_probs=return_probs, freeze_quad=freeze_quad)
                    reg_terms.append(out.reg)
                else:
                    out = window_attention(y, weights, cfg.window, use_bias=use_bias,
                                           return_probs=return_probs)
                layers.append({
                    "name": pre, "stage": s, "block": i, "heads": n, "window": cfg.window,
                    "hw": (x.shape[1], x.shape[2]), "stride": stride,
                    "quad_coords": None if out.quad_coords is None else out.quad_coords.value,
                    "transforms": out.transforms, "surrogate": out.surrogate,
                    "attn_probs": out.attn_probs,
                })
                x = ad.add(x, out.features)
                y = ad.layer_norm(x, P[f"{pre}.norm2.weight"], P[f"{pre}.norm2.bias"])
                y = ad.gelu(ad.linear(y, P[f"{pre}.mlp.fc1.weight"], P[f"{pre}.mlp.fc1.bias"]))
                y = ad.linear(y, P[f"{pre}.mlp.fc2.weight"], P[f"{pre}.mlp.fc2.bias"])
                x = ad.add(x, y)
        x = ad.layer_norm(x, P["norm.weight"], P["norm.bias"])
        pooled = ad.mean(x, axis=(1, 2))
        reg = reg_terms[0] if reg_terms else ad.const(np.zeros((), dtype=self.dtype))
        for r in reg_terms[1:]:
            reg = ad.add(reg, r)
        return pooled, {"reg": reg, "layers": layers}

    def forward(self, images, **kwargs):
        """Logits (B, num_classes) and ``aux`` with the summed reg loss and per-layer geometry."""
        pooled, aux = self.features(images, **kwargs)
        logits = ad.linear(pooled, self.params["head.weight"], self.params["head.bias"])
        return logits, aux

    __call__ = forward

    def loss(self, images, labels, **kwargs):
        """Cross-entropy + regularization; returns (total, ce, reg, logits, aux)."""
        logits, aux = self.forward(images, **kwargs)
        ce = ad.cross_entropy(logits, labels)
        return ad.add(ce, aux["reg"]), ce, aux["reg"], logits, aux


def _patch_merge(x: Node, P, prefix: str) -> Node:
    b, h, w, c = x.shape
    t = ad.reshape(x, (b, h // 2, 2, w // 2, 2, c))
    t = ad.transpose(t, (0, 1, 3, 4, 2, 5))
    t = ad.reshape(t, (b, h // 2, w // 2, 4 * c))
    t = ad.layer_norm(t, P[f"{prefix}.norm.weight"], P[f"{prefix}.norm.bias"])
    return ad.linear(t, P[f"{prefix}.reduction.weight"])


def build(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> QFormer:
    """Fresh model; the quadrangle head is zero-initialized (identity transforms)."""
    rng = np.random.default_rng(seed)
    params = {name: ad.param(_init_value(name, shape, rng, dtype), name=name)
              for name, shape in parameter_shapes(cfg).items()}
    return QFormer(cfg, params)


def paired_window_twin(model: QFormer) -> QFormer:
    """Window-attention model sharing every weight, with a zero bias table."""
    cfg = replace(model.config, attention="window")
    twin = build(cfg, dtype=model.dtype)
    for name, node in twin.params.items():
        if name in model.params:
            node.value = model.params[name].value.copy()
        else:
            node.value = np.zeros_like(node.value)
    return twin


def config_json(cfg: ModelConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
