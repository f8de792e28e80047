"""Analytic FLOP counts for QFormer configurations.

Two unit systems are used:

* FLOPs: a multiply-add counts 2, every other arithmetic op (add, mul,
  exp, divide, compare) counts 1. Softmax costs 4 per logit (max-subtract,
  exp, sum, divide); LayerNorm 7 per element; GELU 8 per element.
* multiply-accumulate units ("MACs"), used only for the per-component
  breakdown of the quadrangle overhead so it can be compared with the
  closed form ``(54 + 4N/w^2) * H * W * C``: depthwise 7x7 CPE ``49 HWC``,
  window pooling ``HWC``, the 1x1 prediction conv ``9NC * HW / w^2``,
  bilinear sampling ``4 HWC`` (four neighbours per channel per sampled
  point, one C-channel map) and coordinate projection ``9N * HW``.

Which overhead is charged to QA follows the reference architectures: the
hierarchical reference (Swin) has no CPE, so CPE counts as extra there;
the plain reference already carries its own position encoding, so only
the quadrangle module is extra.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .model import ModelConfig

CONVENTION = ("multiply-add = 2 FLOPs; add/mul/exp/div = 1; softmax 4/logit; "
              "layernorm 7/element; gelu 8/element; QA components in multiply-accumulate units")


@dataclass
class LayerFlops:
    name: str
    kind: str
    hw: tuple
    channels: int
    heads: int = 0
    window: int = 0
    flops: dict = field(default_factory=dict)
    qa_macs: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(sum(self.flops.values()))

    @property
    def closed_form_macs(self) -> float:
        """Predicted QA overhead (54 + 4N/w^2) * HWC for this layer."""
        if not self.qa_macs:
            return 0.0
        h, w = self.hw
        return (54 + 4 * self.heads / self.window ** 2) * h * w * self.channels


@dataclass
class FlopsReport:
    config: dict
    input_hw: tuple
    layers: list
    total_flops: int
    attention_flops: int
    qa_extra_flops: int
    cpe_flops: int
    extra_flops: int
    ratio: float
    measured_extra_macs: float
    predicted_extra_macs: float
    predicted_extra_macs_9n: float
    closed_form_rel_error: float
    convention: str = CONVENTION

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [dict(asdict(l), total=l.total, closed_form_macs=l.closed_form_macs)
                       for l in self.layers]
        return d


def _ceil_to(v: int, w: int) -> int:
    return -(-v // w) * w


def block_flops(name: str, h: int, w_: int, c: int, n: int, window: int, mlp_ratio: float,
                attention: str, cpe_kernel: int = 7) -> LayerFlops:
    t = h * w_
    hp, wp = _ceil_to(h, window), _ceil_to(w_, window)
    tp = hp * wp
    nw = tp // (window * window)
    m = window * window
    hidden = int(round(c * mlp_ratio))
    k2 = cpe_kernel * cpe_kernel
    f = {
        "cpe": 2 * k2 * t * c + 2 * t * c,
        "norm1": 7 * t * c,
        "qkv": 3 * (2 * tp * c * c + tp * c),
        "attn_logits": 2 * tp * m * c + tp * m * n,
        "attn_softmax": 4 * tp * m * n,
        "attn_values": 2 * tp * m * c,
        "proj": 2 * t * c * c + t * c,
        "residual": 2 * t * c,
        "norm2": 7 * t * c,
        "mlp": 2 * t * c * hidden + t * hidden + 8 * t * hidden + 2 * t * hidden * c + t * c,
    }
    qa = {}
    if attention == "window":
        f["rel_bias"] = n * tp * m
    else:
        f["qa_pool"] = tp * c + nw * c
        f["qa_act"] = nw * c
        f["qa_predict"] = 2 * nw * c * 9 * n + 9 * n * nw
        f["qa_transform"] = 190 * nw * n
        f["qa_coords"] = 20 * tp * n
        # key and value maps, 7 FLOPs per channel plus 12 per point for weights
        f["qa_sample"] = 2 * 7 * tp * c + 12 * tp * n
        qa = {
            "cpe": k2 * t * c,
            "pool": tp * c,
            "prediction": 9 * n * c * nw,
            "sampling": 4 * tp * c,
            "coords": 9 * n * tp,
        }
    return LayerFlops(name, "block", (h, w_), c, n, window, f, qa)


def count(cfg: ModelConfig, input_hw: tuple | None = None) -> FlopsReport:
    h, w = input_hw or (cfg.image_size, cfg.image_size)
    p = cfg.patch_size
    layers = []
    gh, gw = h // p, w // p
    c0 = cfg.channels[0]
    layers.append(LayerFlops("patch_embed", "embed", (gh, gw), c0, flops={
        "linear": 2 * gh * gw * p * p * cfg.in_chans * c0 + gh * gw * c0,
        "norm": 7 * gh * gw * c0}))
    for s, depth in enumerate(cfg.depths):
        c, n = cfg.channels[s], cfg.heads[s]
        if s > 0:
            cin = cfg.channels[s - 1]
            gh, gw = gh // 2, gw // 2
            layers.append(LayerFlops(f"stages.{s}.downsample", "downsample", (gh, gw), c, flops={
                "norm": 7 * gh * gw * 4 * cin, "reduction": 2 * gh * gw * 4 * cin * c}))
        for i in range(depth):
            layers.append(block_flops(f"stages.{s}.blocks.{i}", gh, gw, c, n, cfg.window,
                                      cfg.mlp_ratio, cfg.attention, cfg.cpe_kernel))
    cl = cfg.channels[-1]
    layers.append(LayerFlops("head", "head", (gh, gw), cl, flops={
        "norm": 7 * gh * gw * cl, "pool": gh * gw * cl,
        "linear": 2 * cl * cfg.num_classes + cfg.num_classes}))

    blocks = [l for l in layers if l.kind == "block"]
    total = sum(l.total for l in layers)
    attention = sum(l.flops[k] for l in blocks for k in l.flops
                    if k.startswith(("attn_", "qkv", "proj", "rel_bias")))
    qa_extra = sum(l.flops[k] for l in blocks for k in l.flops if k.startswith("qa_"))
    cpe_flops = sum(l.flops["cpe"] for l in blocks)
    charge_cpe = cfg.variant == "hierarchical" and cfg.attention == "quadrangle"
    extra = qa_extra + (cpe_flops if charge_cpe else 0)

    qa_blocks = [l for l in blocks if l.qa_macs]
    measured = float(sum(sum(l.qa_macs.values()) for l in qa_blocks))
    predicted = float(sum(l.closed_form_macs for l in qa_blocks))
    predicted_9n = float(sum((54 + 9 * l.heads / l.window ** 2) * l.hw[0] * l.hw[1] * l.channels
                             for l in qa_blocks))
    rel = abs(measured - predicted) / predicted if predicted else 0.0
    return FlopsReport(
        config=cfg.to_dict(), input_hw=(h, w), layers=layers, total_flops=int(total),
        attention_flops=int(attention), qa_extra_flops=int(qa_extra), cpe_flops=int(cpe_flops),
        extra_flops=int(extra), ratio=extra / total if total else 0.0,
        measured_extra_macs=measured, predicted_extra_macs=predicted,
        predicted_extra_macs_9n=predicted_9n, closed_form_rel_error=rel)


def layer_closed_form_errors(report: FlopsReport) -> list[tuple[str, float]]:
    """Per-QA-layer relative gap between component sum and the closed form."""
    out = []
    for l in report.layers:
        if l.qa_macs:
            pred = l.closed_form_macs
            out.append((l.name, abs(sum(l.qa_macs.values()) - pred) / pred))
    return out
