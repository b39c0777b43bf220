"""Command-line entry point: ``salfau {gen-data,train,predict,eval,shapes}``.

Settings resolve as: command-line flags, then the ``--config`` file
(``key = value`` lines, ``#`` comments), then the built-in defaults.
Exit codes: 0 success, 1 runtime/data error, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import DatasetManifest, gen_synthetic, load_samples, preprocess_test, read_image, restore, to_unit, write_pgm
from .loss import LossWeights
from .metrics import EM_MODES, MetricConfig, evaluate_dataset
from .network import ConfigError, NetworkConfig, build_network, format_plan, forward, network_from_state, shape_plan
from .optim import Adam, train_loop
from .tensor import Tensor

logger = logging.getLogger("salfau")

DEFAULTS: dict[str, object] = {
    "base_channels": 64,
    "input_size": 288,
    "lr": 1e-3,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "weight_decay": 0.0,
    "batch": 12,
    "iters": 500_000,
    "seed": 0,
    "w_side1": 1.0,
    "w_side2": 1.0,
    "w_side3": 1.0,
    "w_side4": 1.0,
    "w_fuse": 1.0,
    "checkpoint_every": 0,
    "em_threshold_mode": "adaptive",
}


class UsageError(Exception):
    """Bad flags or configuration (exit code 2)."""


def _coerce(key: str, raw: str):
    kind = type(DEFAULTS[key])
    try:
        value = kind(raw)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from None
    if key == "em_threshold_mode" and value not in EM_MODES:
        raise UsageError(f"config key {key!r} must be one of {EM_MODES}, got {value!r}")
    return value


def parse_config(text: str) -> dict[str, object]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise UsageError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def resolve_config(path, overrides: dict[str, object]) -> dict[str, object]:
    cfg = dict(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        cfg.update(parse_config(text))
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def _network_config(cfg) -> NetworkConfig:
    try:
        return NetworkConfig(3, int(cfg["base_channels"]), int(cfg["input_size"]))
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def cmd_gen_data(args) -> int:
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    if args.size < 16:
        raise UsageError(f"--size must be >= 16, got {args.size}")
    manifest = gen_synthetic(args.count, args.size, args.seed, args.out)
    print(f"wrote {len(manifest)} pairs and {Path(args.out) / 'manifest.txt'}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, {"iters": args.iters, "batch": args.batch, "seed": args.seed})
    net_cfg = _network_config(cfg)
    if cfg["batch"] < 1 or cfg["iters"] < 0:
        raise UsageError("batch must be >= 1 and iters >= 0")
    samples = load_samples(DatasetManifest.read(args.data))
    net = build_network(net_cfg, seed=int(cfg["seed"]))
    opt = Adam(net.named_parameters(), lr=cfg["lr"], beta1=cfg["beta1"], beta2=cfg["beta2"],
               eps=cfg["eps"], weight_decay=cfg["weight_decay"])
    weights = LossWeights(tuple(cfg[f"w_side{m}"] for m in range(1, 5)), cfg["w_fuse"])
    log_path = Path(args.log) if args.log else Path(f"{args.out}.loss.tsv")

    with open(log_path, "w", encoding="utf-8") as log:
        def on_iter(it, value):
            log.write(f"{it}\t{value!r}\n")
            if it % 50 == 0:
                logger.info("iteration %d: loss %.4f", it, value)

        train_loop(net, samples, weights, iters=int(cfg["iters"]), batch=int(cfg["batch"]),
                   seed=int(cfg["seed"]), optimizer=opt, checkpoint_every=int(cfg["checkpoint_every"]),
                   checkpoint_path=args.out, on_iter=on_iter)
    checkpoint.save(args.out, net.state_dict(), opt.state_dict())
    print(f"checkpoint written to {args.out}; loss log {log_path}")
    return 0


def predict_map(net, raster: np.ndarray, size: int) -> np.ndarray:
    """Fused saliency map for one raster, restored to its original size."""
    x, original = preprocess_test(raster, size)
    fused = forward(net, Tensor(x.astype(np.float32)), "eval").fused.data[0]
    return np.clip(restore(fused, original), 0, 1)


def cmd_predict(args) -> int:
    if args.size % 16:
        raise UsageError(f"--size must be divisible by 16, got {args.size}")
    state, _ = checkpoint.load(args.model)
    net = network_from_state(state)
    write_pgm(args.output, predict_map(net, read_image(args.input), args.size))
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args.config, {})
    metric_cfg = MetricConfig(em_threshold_mode=str(cfg["em_threshold_mode"]))
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    preds = {p.stem: p for p in pred_dir.glob("*.pgm")}
    gts = {p.stem: p for p in gt_dir.glob("*.pgm")}
    names = sorted(preds.keys() & gts.keys())
    if not names:
        print(f"error: no same-named .pgm files in {pred_dir} and {gt_dir}", file=sys.stderr)
        return 1

    def loader(path, binary):
        def load():
            raster = read_image(path)[0]
            return raster >= 128 if binary else to_unit(raster)
        return load

    report = evaluate_dataset([(n, loader(preds[n], False), loader(gts[n], True)) for n in names], metric_cfg)
    report.write(args.report)
    print(report.to_text().splitlines()[-1])
    return 0


def cmd_shapes(args) -> int:
    cfg = resolve_config(args.config, {"base_channels": args.base_channels, "input_size": args.input_size})
    print(format_plan(shape_plan(_network_config(cfg))))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="salfau", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train from a manifest (flags override --config)")
    p.add_argument("--data", required=True, help="manifest file")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--iters", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--log", help="loss log path (default: <out>.loss.tsv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write the fused saliency map of one image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--size", type=int, default=320, help="network input size (default 320)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predicted maps against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("shapes", help="print the per-stage shape table")
    p.add_argument("--config")
    p.add_argument("--base-channels", type=int)
    p.add_argument("--input-size", type=int)
    p.set_defaults(func=cmd_shapes)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"salfau {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, ArithmeticError) as exc:
        print(f"salfau {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
