"""Central finite-difference checks of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attention import cpe, init_attention, quadrangle_attention
from .quad import RegConfig, build_transform, project_coords
from .sampling import bilinear_sample
from .windowing import centers

OP_TOL = 1e-4
MODEL_TOL = 1e-3
STEP = 1e-5
# gradients below this magnitude are compared in absolute terms
FLOOR = 1e-7


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> float:
    """max |a - n| / max(|a|_inf, |n|_inf, floor)."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def analytic_grads(fn: Callable, inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    nodes = {k: ad.param(np.array(v, dtype=np.float64)) for k, v in inputs.items()}
    with ad.Tape() as tape:
        out = fn(nodes)
    tape.backward(out)
    return {k: (n.grad if n.grad is not None else np.zeros_like(n.value)) for k, n in nodes.items()}


def numeric_grad(fn: Callable, inputs: dict[str, np.ndarray], name: str, h: float = STEP,
                 entries=None) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. ``inputs[name]`` (optionally only at ``entries``)."""
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    x = base[name]
    g = np.zeros_like(x)
    flat_x, flat_g = x.reshape(-1), g.reshape(-1)
    nodes = {k: ad.const(v) for k, v in base.items()}
    idx = range(x.size) if entries is None else entries
    for i in idx:
        orig = flat_x[i]
        flat_x[i] = orig + h
        fp = float(fn(nodes).value)
        flat_x[i] = orig - h
        fm = float(fn(nodes).value)
        flat_x[i] = orig
        flat_g[i] = (fp - fm) / (2 * h)
    return g


@dataclass
class CheckResult:
    target: str
    errors: dict
    tol: float

    @property
    def worst(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.worst < self.tol


def check(target: str, fn: Callable, inputs: dict[str, np.ndarray], tol: float = OP_TOL,
          h: float = STEP) -> CheckResult:
    ga = analytic_grads(fn, inputs)
    errors = {k: rel_error(ga[k], numeric_grad(fn, inputs, k, h)) for k in inputs}
    return CheckResult(target, errors, tol)


def _away_from(x: np.ndarray, points, margin: float, rng) -> np.ndarray:
    """Resample entries within ``margin`` of any of ``points``."""
    x = np.array(x)
    for _ in range(100):
        bad = np.zeros(x.shape, dtype=bool)
        for p in points:
            bad |= np.abs(x - p) < margin
        if not bad.any():
            return x
        x[bad] = rng.normal(size=int(bad.sum()))
    raise RuntimeError("could not resample away from kinks")


def _proj(rng, shape):
    """Fixed random weights turning an op output into a scalar."""
    w = rng.normal(size=shape)
    return lambda out: ad.sum(ad.mul(out, w))


def _off_lattice(rng, shape, lo, hi, margin=1e-3):
    x = rng.uniform(lo, hi, shape)
    frac = x - np.floor(x)
    x = np.where(frac < margin, x + 2 * margin, x)
    return np.where(frac > 1 - margin, x - 2 * margin, x)


def op_cases(seed: int = 0) -> dict[str, tuple[Callable, dict]]:
    """name -> (fn, inputs) for every differentiable op."""
    rng = np.random.default_rng(seed)
    n = rng.normal
    cases = {}

    def add_case(name, make, inputs, out_shape):
        p = _proj(rng, out_shape)
        cases[name] = (lambda d, make=make, p=p: p(make(d)), inputs)

    add_case("matmul", lambda d: ad.matmul(d["a"], d["b"]), {"a": n(size=(3, 4)), "b": n(size=(4, 2))}, (3, 2))
    add_case("matmul_batched", lambda d: ad.matmul(d["a"], d["b"]),
             {"a": n(size=(2, 3, 4)), "b": n(size=(4, 5))}, (2, 3, 5))
    add_case("softmax", lambda d: ad.softmax(d["x"]), {"x": n(size=(7,))}, (7,))
    add_case("add", lambda d: ad.add(d["a"], d["b"]), {"a": n(size=(2, 3, 4)), "b": n(size=(3, 4))}, (2, 3, 4))
    add_case("mul", lambda d: ad.mul(d["a"], d["b"]), {"a": n(size=(3, 4)), "b": n(size=(3, 4))}, (3, 4))
    add_case("scale", lambda d: ad.scale(d["x"], -2.5), {"x": n(size=(5,))}, (5,))
    add_case("leaky_relu", lambda d: ad.leaky_relu(d["x"], 0.01),
             {"x": _away_from(n(size=(10,)), [0.0], 1e-3, rng)}, (10,))
    add_case("gelu", lambda d: ad.gelu(d["x"]), {"x": n(size=(10,))}, (10,))
    add_case("sub_neg", lambda d: ad.neg(ad.sub(d["a"], d["b"])),
             {"a": n(size=(2, 3)), "b": n(size=(2, 3))}, (2, 3))
    add_case("exp", lambda d: ad.exp(d["x"]), {"x": n(size=(6,))}, (6,))
    add_case("sin", lambda d: ad.sin(d["x"]), {"x": n(size=(6,))}, (6,))
    add_case("cos", lambda d: ad.cos(d["x"]), {"x": n(size=(6,))}, (6,))
    x = _away_from(n(size=(6,)), [0.0], 0.3, rng)
    add_case("reciprocal", lambda d: ad.reciprocal(d["x"]), {"x": x}, (6,))
    add_case("layer_norm", lambda d: ad.layer_norm(d["x"], d["w"], d["b"]),
             {"x": n(size=(3, 5)), "w": n(size=(5,)), "b": n(size=(5,))}, (3, 5))
    add_case("mean_pool2d", lambda d: ad.mean_pool2d(d["x"], 2), {"x": n(size=(2, 4, 6, 3))}, (2, 2, 3, 3))
    add_case("conv1x1", lambda d: ad.conv1x1(d["x"], d["w"], d["b"]),
             {"x": n(size=(2, 3, 3, 4)), "w": n(size=(5, 4)), "b": n(size=(5,))}, (2, 3, 3, 5))
    add_case("depthwise_conv2d", lambda d: ad.depthwise_conv2d(d["x"], d["w"], d["b"]),
             {"x": n(size=(1, 5, 6, 2)), "w": n(size=(3, 3, 2)), "b": n(size=(2,))}, (1, 5, 6, 2))
    add_case("linear", lambda d: ad.linear(d["x"], d["w"], d["b"]),
             {"x": n(size=(4, 3)), "w": n(size=(3, 2)), "b": n(size=(2,))}, (4, 2))
    labels = rng.integers(0, 5, size=4)
    cases["cross_entropy"] = (lambda d: ad.cross_entropy(d["x"], labels), {"x": n(size=(4, 5))})
    add_case("reshape_transpose", lambda d: ad.transpose(ad.reshape(d["x"], (3, 4)), (1, 0)),
             {"x": n(size=(2, 6))}, (4, 3))
    add_case("swapaxes", lambda d: ad.swapaxes(d["x"], 0, 2), {"x": n(size=(2, 3, 4))}, (4, 3, 2))
    add_case("sum_mean", lambda d: ad.add(ad.sum(d["x"], axis=1), ad.mean(d["x"], axis=1)),
             {"x": n(size=(3, 4))}, (3,))
    add_case("getitem_pad", lambda d: ad.pad(ad.getitem(d["x"], (slice(1, 3),)), ((1, 0), (0, 2))),
             {"x": n(size=(4, 3))}, (3, 5))
    add_case("concat_stack", lambda d: ad.stack([ad.concat([d["a"], d["b"]], axis=0), d["c"]], axis=0),
             {"a": n(size=(2, 3)), "b": n(size=(1, 3)), "c": n(size=(3, 3))}, (2, 3, 3))
    idx = np.array([[0, 2, 2], [1, 0, 3]])
    add_case("take", lambda d: ad.take(d["x"], idx, axis=0), {"x": n(size=(4, 2))}, (2, 3, 2))
    add_case("safe_reciprocal", lambda d: ad.safe_reciprocal(d["x"]), {"x": x}, (6,))

    # bilinear sampling, both gradient paths, points inside and straddling the border
    feat = n(size=(2, 4, 5, 2, 3))
    coords = _off_lattice(rng, (2, 3, 2, 4, 2), -1.5, 5.5)
    add_case("grid_sample", lambda d: bilinear_sample(d["feature"], d["coords"]),
             {"feature": feat, "coords": coords}, (2, 3, 2, 4, 3))

    # project_coords w.r.t. t through the composed transform
    w, hh, ww = 2, 4, 6
    cen = centers(hh, ww, w)
    t = 0.2 * n(size=(1, cen.xy.shape[0], 2, 9))
    add_case("project_coords", lambda d: project_coords(build_transform(d["t"], ww / w, hh / w), cen, w),
             {"t": t}, (1, cen.xy.shape[0], 2, w * w, 2))

    add_case("cpe", lambda d: cpe(d["x"], d["w"], d["b"]),
             {"x": n(size=(1, 4, 4, 2)), "w": n(size=(7, 7, 2)), "b": n(size=(2,))}, (1, 4, 4, 2))
    return cases


def qa_layer_case(seed: int = 0):
    """Scalar output of one QA layer as a function of the quadrangle head weights."""
    rng = np.random.default_rng(seed)
    weights = init_attention(8, 2, 2, rng, kind="quadrangle", std=0.3)
    x = rng.normal(size=(1, 4, 6, 8))
    qw = 0.05 * rng.normal(size=weights.quad_w.shape)
    qb = 0.05 * rng.normal(size=weights.quad_b.shape)
    proj = rng.normal(size=(1, 4, 6, 8))

    def fn(d):
        weights.quad_w, weights.quad_b = d["quad_w"], d["quad_b"]
        out = quadrangle_attention(ad.const(x), weights, 2, RegConfig(1.0))
        return ad.add(ad.sum(ad.mul(out.features, proj)), out.reg)

    return fn, {"quad_w": qw, "quad_b": qb}


def model_check(seed: int = 0, num_params: int = 5, tol: float = MODEL_TOL) -> CheckResult:
    """Total loss of the micro hierarchical model w.r.t. randomly chosen parameter entries."""
    from .model import build, get_preset

    rng = np.random.default_rng(seed)
    cfg = get_preset("qformer-micro-h", image_size=16)
    model = build(cfg, seed=seed, dtype=np.float64)
    # move the quadrangle heads off the identity so sampling points are off-lattice
    for name, p in model.params.items():
        if name.endswith(("quad_w", "quad_b")):
            p.value = 0.05 * rng.normal(size=p.shape)
    images = rng.uniform(0, 1, size=(3, 16, 16))
    labels = rng.integers(0, cfg.num_classes, size=3)
    names = list(model.params)
    chosen = []
    while len(chosen) < num_params:
        name = names[rng.integers(len(names))]
        entry = int(rng.integers(model.params[name].value.size))
        if (name, entry) not in chosen:
            chosen.append((name, entry))

    def loss_value():
        return float(model.loss(images, labels)[0].value)

    with ad.Tape() as tape:
        loss = model.loss(images, labels)[0]
    tape.backward(loss)
    errors = {}
    for name, entry in chosen:
        p = model.params[name]
        a = 0.0 if p.grad is None else float(p.grad.reshape(-1)[entry])
        flat = p.value.reshape(-1)
        orig = flat[entry]
        flat[entry] = orig + STEP
        fp = loss_value()
        flat[entry] = orig - STEP
        fm = loss_value()
        flat[entry] = orig
        errors[f"{name}[{entry}]"] = rel_error(a, (fp - fm) / (2 * STEP))
    return CheckResult("model", errors, tol)


def run_all(seed: int = 0, target: str | None = None) -> list[CheckResult]:
    """Run op checks, the QA layer check and the full-model check (or one ``target``)."""
    results = []
    cases = op_cases(seed)
    for name, (fn, inputs) in cases.items():
        if target in (None, "ops", name):
            results.append(check(name, fn, inputs))
    if target in (None, "qa_layer"):
        fn, inputs = qa_layer_case(seed)
        results.append(check("qa_layer", fn, inputs))
    if target in (None, "model"):
        results.append(model_check(seed))
    return results
