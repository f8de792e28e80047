"""AdamW, warmup+cosine schedule and the epoch loop."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ConfigError, NumericError
from .model import ModelConfig, QFormer

LOG_SCHEMA = 1


class TrainingDiverged(NumericError):
    """Non-finite loss; ``stats`` holds per-layer surrogate-parameter statistics."""

    def __init__(self, message, stats):
        super().__init__(message)
        self.stats = stats


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    epochs: int = 30
    batch_size: int = 64
    warmup_epochs: int = 2
    min_lr: float = 1e-5
    seed: int = 0
    freeze_quad: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        bad = []
        if self.epochs < 1:
            bad.append("epochs must be >= 1")
        if self.batch_size < 1:
            bad.append("batch_size must be >= 1")
        if self.lr <= 0:
            bad.append("lr must be > 0")
        if self.weight_decay < 0:
            bad.append("weight_decay must be >= 0")
        if self.warmup_epochs < 0:
            bad.append("warmup_epochs must be >= 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            bad.append("betas must be two values in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            bad.append("dtype must be float32 or float64")
        if bad:
            raise ConfigError("invalid train config: " + "; ".join(bad))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)} | {"lambda", "optimizer", "preset"}
        unknown = sorted(set(d) - known - {"data"})
        if unknown:
            raise ConfigError(f"unknown train config keys: {unknown}")
        from .model import get_preset

        model = d.pop("model", None) or {}
        preset = d.pop("preset", None) or (model.pop("preset", None) if isinstance(model, dict) else None)
        model = dict(model)
        if "lambda" in d:
            model["lam"] = d.pop("lambda")
        mcfg = get_preset(preset, **model) if preset else ModelConfig.from_dict(model)
        opt = d.pop("optimizer", None) or {}
        d.pop("data", None)
        for k in ("lr", "weight_decay", "betas"):
            if k in opt:
                d[k] = opt[k]
        return cls(model=mcfg, **d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["betas"] = list(self.betas)
        return d


def lr_at(step: int, total: int, warmup: int, base: float, floor: float = 0.0) -> float:
    """Linear warmup to ``base`` then cosine decay to ``floor``."""
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    if total <= warmup:
        return base
    progress = (step - warmup) / max(total - warmup, 1)
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def _decays(name: str, node: Node) -> bool:
    return node.value.ndim >= 2 and not name.endswith("rel_pos")


class AdamW:
    """Decoupled weight decay Adam; parameters without a gradient are left untouched."""

    def __init__(self, params: dict[str, Node], lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.05):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay and _decays(name, p):
                p.value *= 1 - lr * self.weight_decay
            p.value -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def surrogate_stats(aux: dict) -> list[dict]:
    """Mean/std/min/max of each QA layer's surrogate parameters, per component."""
    out = []
    for layer in aux.get("layers", []):
        t = layer.get("surrogate")
        if t is None:
            continue
        flat = t.reshape(-1, 9)
        with np.errstate(all="ignore"):
            out.append({
                "layer": layer["name"],
                "mean": np.nanmean(flat, axis=0).tolist() if np.isfinite(flat).any() else None,
                "std": np.nanstd(flat, axis=0).tolist() if np.isfinite(flat).any() else None,
                "min": np.nanmin(flat, axis=0).tolist() if np.isfinite(flat).any() else None,
                "max": np.nanmax(flat, axis=0).tolist() if np.isfinite(flat).any() else None,
                "nonfinite": int((~np.isfinite(flat)).sum()),
            })
    return out


def evaluate(model: QFormer, images: np.ndarray, labels: np.ndarray, batch_size: int = 256,
             freeze_quad: bool = False) -> dict:
    """Accuracy, mean cross-entropy and mean reg loss; no tape is recorded."""
    n = len(images)
    correct, ce_sum, reg_sum = 0, 0.0, 0.0
    for start in range(0, n, batch_size):
        xb = images[start:start + batch_size]
        yb = labels[start:start + batch_size].astype(np.int64)
        logits, aux = model.forward(xb.astype(model.dtype), freeze_quad=freeze_quad)
        ce = ad.cross_entropy(logits, yb)
        correct += int((logits.value.argmax(axis=1) == yb).sum())
        ce_sum += float(ce.value) * len(xb)
        reg_sum += float(aux["reg"].value) * len(xb)
    return {"acc": correct / max(n, 1), "ce": ce_sum / max(n, 1), "reg": reg_sum / max(n, 1)}


def train(model: QFormer, cfg: TrainConfig, train_data, test_data=None,
          log: Callable[[dict], None] | None = None):
    """Train ``model`` in place; returns (history, best_params).

    ``best_params`` is a name -> array snapshot at the epoch with the best
    test accuracy (train accuracy if no test split is given).
    """
    x_train, y_train = train_data
    y_train = np.asarray(y_train).astype(np.int64)
    x_train = np.asarray(x_train, dtype=model.dtype)
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    n = len(x_train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    warmup = steps_per_epoch * cfg.warmup_epochs
    history, best, best_acc, step = [], None, -1.0, 0
    last_aux: dict = {}
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = {"loss": 0.0, "ce": 0.0, "reg": 0.0, "correct": 0}
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            lr = lr_at(step, total, warmup, cfg.lr, cfg.min_lr)
            try:
                with ad.Tape() as tape:
                    loss, ce, reg, logits, aux = model.loss(xb, yb, freeze_quad=cfg.freeze_quad)
            except NumericError as exc:
                # the sampler rejects non-finite coordinates before a loss exists
                raise TrainingDiverged(f"{exc} at epoch {epoch}, step {step}",
                                       surrogate_stats(last_aux)) from exc
            if not np.isfinite(loss.value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {step}", surrogate_stats(aux))
            last_aux = aux
            opt.zero_grad()
            tape.backward(loss)
            opt.step(lr)
            sums["loss"] += float(loss.value) * len(idx)
            sums["ce"] += float(ce.value) * len(idx)
            sums["reg"] += float(reg.value) * len(idx)
            sums["correct"] += int((logits.value.argmax(axis=1) == yb).sum())
            step += 1
        record = {
            "schema": LOG_SCHEMA, "epoch": epoch + 1, "lr": lr,
            "train_loss": sums["loss"] / n, "train_ce": sums["ce"] / n,
            "train_reg": sums["reg"] / n, "train_acc": sums["correct"] / n,
        }
        score = record["train_acc"]
        if test_data is not None:
            ev = evaluate(model, test_data[0], np.asarray(test_data[1]), freeze_quad=cfg.freeze_quad)
            record.update(test_acc=ev["acc"], test_ce=ev["ce"], test_reg=ev["reg"])
            score = ev["acc"]
        if score > best_acc:
            best_acc = score
            best = {k: p.value.copy() for k, p in model.params.items()}
            record["best"] = True
        history.append(record)
        if log is not None:
            log(record)
    return history, best
