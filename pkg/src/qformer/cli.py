"""Command-line entry point: ``qformer <command> ...``.

Exit codes: 0 ok, 2 configuration or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, data, flops, gradcheck
from .analysis import layer_attention_distances, quad_records, scale_factor_summary
from .errors import CheckpointError, ConfigError, NumericError
from .model import PRESETS, ModelConfig, build, get_preset
from .training import TrainConfig, TrainingDiverged, evaluate, train

log = logging.getLogger("qformer")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def _parse_hw(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--input must look like HxW, got {text!r}") from None
    return h, w


def _load_split(path: str, split: str):
    p = Path(path)
    if p.is_dir():
        p = p / f"{split}.bin"
    if not p.exists():
        raise ConfigError(f"dataset split not found: {p}")
    return data.read_split(p)


def _dataset_for(cfg: dict, out_dir: Path):
    spec_d = cfg.get("data", {})
    if "path" in spec_d:
        splits = data.load_dataset(spec_d["path"])
        if "train" not in splits:
            raise ConfigError(f"no train.bin under {spec_d['path']}")
        return splits["train"], splits.get("test")
    spec = data.SynthSpec.from_dict(spec_d.get("spec", {}))
    return data.generate(spec, "train"), data.generate(spec, "test")


def cmd_gen_data(args) -> int:
    spec = data.SynthSpec.from_dict(_read_json(args.spec) if args.spec else {})
    sums = data.write_dataset(spec, args.out)
    print(_dump({"out": str(args.out), "checksums": sums}))
    return EXIT_OK


def cmd_train(args) -> int:
    raw = _read_json(args.config)
    cfg = TrainConfig.from_dict(raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (train_x, train_y), test = _dataset_for(raw, out)
    mcfg = cfg.model
    if train_x.shape[1] != mcfg.image_size:
        raise ConfigError(f"dataset images are {train_x.shape[1]} px but model expects {mcfg.image_size}")
    model = build(mcfg, seed=cfg.seed, dtype=np.dtype(cfg.dtype))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    metrics = out / "metrics.jsonl"

    def write(record):
        with metrics.open("a") as fh:
            fh.write(_dump(record) + "\n")
        log.info("epoch %d: %s", record["epoch"], record)
        if record.get("best"):
            checkpoint.save(model, out / "best.ckpt")

    try:
        train(model, cfg, (train_x, train_y), test, log=write)
    except TrainingDiverged as exc:
        dump = {"error": str(exc), "surrogate_stats": exc.stats}
        (out / "nan_dump.json").write_text(json.dumps(dump, indent=2, sort_keys=True) + "\n")
        print(f"error: {exc}; surrogate statistics written to {out / 'nan_dump.json'}", file=sys.stderr)
        return EXIT_NUMERIC
    checkpoint.save(model, out / "final.ckpt")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = checkpoint.load(args.ckpt)
    x, y = _load_split(args.data, args.split)
    print(_dump(evaluate(model, x, y)))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(args.seed, args.target)
    if not results:
        raise ConfigError(f"unknown gradcheck target {args.target!r}")
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.target:<20} worst_rel_err={r.worst:.3e} tol={r.tol:.0e}")
        if not r.passed:
            for name, err in sorted(r.errors.items()):
                print(f"    {name}: {err:.3e}")
        ok &= r.passed
    return EXIT_OK if ok else EXIT_NUMERIC


def _model_config(spec: str) -> ModelConfig:
    if spec in PRESETS:
        return get_preset(spec)
    raw = _read_json(spec)
    raw = raw.get("model", raw)
    preset = raw.pop("preset", None) if isinstance(raw, dict) else None
    return get_preset(preset, **raw) if preset else ModelConfig.from_dict(raw)


def cmd_flops(args) -> int:
    cfg = _model_config(args.config)
    hw = _parse_hw(args.input) if args.input else None
    report = flops.count(cfg, hw)
    if args.summary:
        print(f"# {flops.CONVENTION}")
        print(f"total_flops={report.total_flops} extra_flops={report.extra_flops} "
              f"ratio={report.ratio:.6f} measured_extra_macs={report.measured_extra_macs:.0f} "
              f"closed_form_macs={report.predicted_extra_macs:.0f} "
              f"closed_form_rel_error={report.closed_form_rel_error:.4f}")
    else:
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def _load_image(path: str, index: int) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".npy":
        return np.load(p)
    if p.suffix == ".bin":
        images, _ = data.read_split(p)
        return images[index]
    raise ConfigError(f"--image must be a .npy array or a dataset .bin split, got {path}")


def cmd_export_quads(args) -> int:
    model = checkpoint.load(args.ckpt)
    image = _load_image(args.image, args.index)
    if image.shape[0] != model.config.image_size:
        raise ConfigError(f"image is {image.shape[0]} px, model expects {model.config.image_size}")
    lines = [_dump(r) for r in quad_records(model, image)]
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_attn_distance(args) -> int:
    model = checkpoint.load(args.ckpt)
    x, _ = _load_split(args.data, args.split)
    if args.limit:
        x = x[: args.limit]
    result = {"layers": layer_attention_distances(model, x)}
    if model.config.attention == "quadrangle":
        result["scale_factors"] = scale_factor_summary(model, x)
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset directory or .bin split")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--target", default=None, help="op name, 'ops', 'qa_layer' or 'model' (default: all)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("flops", help="analytic FLOPs report")
    p.add_argument("--config", required=True, help="preset name or JSON config file")
    p.add_argument("--input", default=None, help="input size HxW (default: config image size)")
    p.add_argument("--summary", action="store_true", help="one-line summary instead of JSON")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("export-quads", help="export quadrangle geometry as JSON lines")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help=".npy image or dataset .bin split")
    p.add_argument("--index", type=int, default=0, help="image index within a .bin split")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_export_quads)

    p = sub.add_parser("attn-distance", help="per-layer attention distance statistics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(func=cmd_attn_distance)

    p = sub.add_parser("gen-data", help="write the synthetic oriented-bars dataset")
    p.add_argument("--spec", default=None, help="JSON SynthSpec (default spec if omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
