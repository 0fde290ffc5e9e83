"""``lvt`` command-line interface."""

from __future__ import annotations

import argparse
import re
import sys
from pathlib import Path

import numpy as np

from lvt import _backend
from lvt.backbone import (
    ModelConfig,
    architecture_table,
    build_model,
    count_params,
    estimate_flops,
    forward_classify,
    forward_features,
    load_model,
    save_weights,
)
from lvt.weights import WeightFormatError, WeightStore

# ImageNet channel statistics, applied to images scaled to [0, 1]
IMAGE_MEAN = np.array([0.485, 0.456, 0.406])
IMAGE_STD = np.array([0.229, 0.224, 0.225])


def _config(path) -> ModelConfig:
    return ModelConfig.default() if path is None else ModelConfig.from_json(path)


def _model(args):
    cfg = _config(args.config)
    if getattr(args, "weights", None):
        return load_model(cfg, args.weights)
    return build_model(cfg, seed=getattr(args, "init_seed", 0))


def load_image(path, channels: int = 3) -> np.ndarray:
    """Read a PNG/PPM (anything Pillow opens) as a normalized (C, H, W) float32 array."""
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        a = np.asarray(im, dtype=np.float64) / 255.0
    if a.ndim == 2:
        return a[None].astype(np.float32)
    return ((a - IMAGE_MEAN) / IMAGE_STD).transpose(2, 0, 1).astype(np.float32)


def parse_shape(text: str) -> tuple:
    if not re.fullmatch(r"\d+(x\d+){3}", text):
        raise argparse.ArgumentTypeError(f"shape must look like BxCxHxW, got {text!r}")
    return tuple(int(v) for v in text.split("x"))


def cmd_summary(args) -> int:
    cfg = _config(args.config)
    model = build_model(cfg)
    params = count_params(model).by_stage()
    flops = estimate_flops(cfg, (cfg.input_channels, cfg.image_size, cfg.image_size)).by_stage()
    print(architecture_table(cfg))
    keys = [f"stage{i + 1}" for i in range(len(cfg.stages))]
    print(f"{'Params':<14}" + "".join(f"{params.get(k, 0) / 1e6:>13.3f}M" for k in keys))
    print(f"{'MACs':<14}" + "".join(f"{flops.get(k, 0) / 1e9:>13.3f}G" for k in keys))
    print(f"at {cfg.image_size}x{cfg.image_size}; MACs counted as FLOPs")
    return 0


def cmd_count(args) -> int:
    cfg = _config(args.config)
    size = args.image_size or cfg.image_size
    print(count_params(build_model(cfg)).format())
    print()
    print(estimate_flops(cfg, (cfg.input_channels, size, size)).format())
    return 0


def cmd_init(args) -> int:
    model = build_model(_config(args.config), seed=args.seed)
    save_weights(model, args.out)
    print(f"wrote {len(model.named_parameters())} tensors to {args.out}")
    return 0


def cmd_forward(args) -> int:
    model = _model(args)
    cfg = model.config
    if args.input:
        x = load_image(args.input, cfg.input_channels)
    else:
        rng = np.random.default_rng(args.seed)
        x = rng.standard_normal((cfg.input_channels, cfg.image_size, cfg.image_size)).astype(np.float32)
    feats = forward_features(model, x)
    print(f"input {tuple(x.shape)}")
    for i, f in enumerate(feats, start=1):
        print(f"stage{i} {tuple(f.shape)}")
    logits = None
    if model.head is not None:
        logits = forward_classify(model, x)
        top = np.argsort(logits)[::-1][: args.top]
        print("logits top-%d: %s" % (len(top), ", ".join(f"{k}:{logits[k]:.4f}" for k in top)))
    if args.dump_activations:
        out = Path(args.dump_activations)
        out.mkdir(parents=True, exist_ok=True)
        store = WeightStore()
        store.add("input", x)
        for i, f in enumerate(feats, start=1):
            store.add(f"stage{i}", f)
        if logits is not None:
            store.add("logits", logits)
        store.save(out / "activations.lvtw")
        print(f"activations written to {out / 'activations.lvtw'}")
    return 0


def cmd_check(args) -> int:
    from lvt.toolkit.suite import run_invariant_suite

    report = run_invariant_suite(args.scope, args.seed, f64=args.f64)
    print(report.format())
    return 0 if report.ok else 1


def cmd_bench(args) -> int:
    from lvt.toolkit.bench import run_bench

    model = _model(args)
    backends = _backend.BACKENDS if args.backend == "both" else (args.backend or _backend.get_backend(),)
    for b in backends:
        print(run_bench(model, args.shape, args.iters, args.threads, backend=b, warmup=args.warmup).format())
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lvt", description="Backbone inspection, inference, checks and benchmarks.")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="model config JSON (default: the built-in 4-stage model)")
        p.set_defaults(fn=fn)
        return p

    add("summary", cmd_summary, "architecture table with per-stage params and MACs")

    p = add("count", cmd_count, "parameter and FLOPs tables")
    p.add_argument("--image-size", type=int, help="square input side for the FLOPs table")

    p = add("init", cmd_init, "write randomly initialised weights")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = add("forward", cmd_forward, "run forward_features (and the head if present)")
    p.add_argument("--weights", help="LVTW weight file (default: random init from --init-seed)")
    p.add_argument("--init-seed", type=int, default=0)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--input", help="PNG or PPM image")
    src.add_argument("--random", action="store_true", help="standard-normal input (the default)")
    p.add_argument("--seed", type=int, default=0, help="seed for --random")
    p.add_argument("--dump-activations", metavar="DIR")
    p.add_argument("--top", type=int, default=5)

    p = sub.add_parser("check", help="run the invariant suite; exit status 1 on any failure")
    p.add_argument("--scope", default="all", choices=("all", "tensor", "nn", "csa", "rasa", "backbone"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--f64", action="store_true")
    p.set_defaults(fn=cmd_check)

    p = add("bench", cmd_bench, "forward latency and achieved MACs/s")
    p.add_argument("--weights")
    p.add_argument("--init-seed", type=int, default=0)
    p.add_argument("--shape", type=parse_shape, default=(1, 3, 224, 224), help="BxCxHxW")
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--threads", type=int)
    p.add_argument("--backend", choices=(*_backend.BACKENDS, "both"))
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (WeightFormatError, ValueError, OSError) as exc:
        print(f"lvt {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
