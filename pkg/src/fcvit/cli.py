"""Command-line entry point: ``fcvit <subcommand> ...``.

Exit codes: 0 success, 1 file/format error or failed gradient check,
2 usage error. ``FCVIT_SEED`` replaces the default seed 0; an explicit
``--seed`` wins over both.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from typing import Sequence

import numpy as np

from .analysis import attention_stats, export_similarity_maps
from .data import ToyDatasetSpec, gen_toy_dataset
from .gradcheck import finite_diff_check
from .io import FormatError, load_tensor, load_weights, save_tensor, save_weights
from .model import PRESETS, ModelConfig, build_model, count_flops, count_params, model_forward, preset
from .tensor import Tensor, cross_entropy
from .train import TrainingDivergedError, train_toy

GRADCHECK_TOL = 1e-4


def default_seed() -> int:
    raw = os.environ.get("FCVIT_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(f"fcvit: FCVIT_SEED must be an integer, got {raw!r}") from None


def _config(args) -> ModelConfig:
    if args.config:
        return ModelConfig.from_json(args.config)
    return preset(args.preset)


def _add_model_flags(p: argparse.ArgumentParser, default: str = "micro") -> None:
    group = p.add_mutually_exclusive_group()
    group.add_argument("--preset", choices=sorted(PRESETS), default=default)
    group.add_argument("--config", metavar="JSON", help="model config file (overrides --preset)")


def _as_batch(x: np.ndarray, dtype) -> Tensor:
    if x.ndim == 3:
        x = x[None]
    return Tensor(x.astype(dtype))


def cmd_params(args) -> int:
    print(count_params(_config(args)))
    return 0


def cmd_flops(args) -> int:
    print(count_flops(_config(args), args.res))
    return 0


def cmd_init(args) -> int:
    params = build_model(_config(args), seed=args.seed, dtype=np.dtype(args.dtype),
                         init="zeros" if args.zeros else "trunc_normal")
    save_weights(params, args.output)
    return 0


def cmd_forward(args) -> int:
    params = load_weights(args.weights)
    x = load_tensor(args.input)
    logits = model_forward(params, _as_batch(x, params.head_weight.dtype))
    save_tensor(logits.data, args.output)
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    params = build_model(cfg, seed=args.seed, dtype=np.float64, init_std=args.init_std)
    rng = np.random.default_rng(args.seed)
    res = 2 * cfg.total_stride if args.res is None else args.res
    x = Tensor(rng.standard_normal((args.batch, 3, res, res)))
    labels = rng.integers(cfg.num_classes, size=args.batch)
    err = finite_diff_check(lambda: cross_entropy(model_forward(params, x), labels),
                            params.parameters(), n_coords=args.coords, seed=args.seed)
    print(f"{err:.6e}")
    return 0 if err < GRADCHECK_TOL else 1


def cmd_train_toy(args) -> int:
    images, labels = gen_toy_dataset(ToyDatasetSpec(args.samples_per_class, args.seed))
    cfg = _config(args)
    log = open(args.log, "w") if args.log else sys.stdout
    try:
        params, _ = train_toy(images, labels, cfg, steps=args.steps, lr=args.lr,
                              batch_size=args.batch_size, seed=args.seed, log=log)
    except TrainingDivergedError as exc:
        print(f"fcvit: training diverged: {exc}", file=sys.stderr)
        return 1
    finally:
        if log is not sys.stdout:
            log.close()
    if args.save:
        save_weights(params, args.save)
    return 0


def cmd_analyze(args) -> int:
    attn = load_tensor(args.attn)
    if attn.ndim < 2 or attn.shape[-1] != attn.shape[-2]:
        raise FormatError(f"attention tensor must end in (n, n), got {attn.shape}")
    stats = attention_stats(attn.reshape(-1, *attn.shape[-2:]))
    print(json.dumps(stats.to_dict()))
    return 0


def cmd_export_sim(args) -> int:
    params = load_weights(args.weights)
    x = load_tensor(args.input)
    maps, consistency = export_similarity_maps(params, _as_batch(x, params.head_weight.dtype).data,
                                               args.block, args.repetition)
    save_tensor(maps, args.output)
    print(json.dumps({"groups": int(maps.shape[0]), "shape": list(maps.shape),
                      "head_consistency": None if math.isnan(consistency) else consistency}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fcvit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    seed = default_seed()

    p = sub.add_parser("params", help="print the parameter count")
    _add_model_flags(p, "tiny")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("flops", help="print the analytic MAC count")
    _add_model_flags(p, "tiny")
    p.add_argument("--res", type=int, default=224)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("init", help="write freshly initialised weights")
    _add_model_flags(p)
    p.add_argument("--output", "-o", required=True)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    p.add_argument("--zeros", action="store_true", help="all-zero weights")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("forward", help="write logits for an input tensor file")
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", "-o", default="logits.fctn")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model loss")
    _add_model_flags(p)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--coords", type=int, default=50)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--res", type=int, default=None, help="input size (default: two output tokens per side)")
    p.add_argument("--init-std", type=float, default=0.2)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-toy", help="train on the synthetic 4-class set")
    _add_model_flags(p)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--samples-per-class", type=int, default=128)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--log", help="JSON-lines log path (default: stdout)")
    p.add_argument("--save", help="write trained weights here")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("analyze", help="histogram and consistency of an attention tensor")
    p.add_argument("--attn", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("export-sim", help="write the similarity maps of one block")
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--block", type=int, required=True)
    p.add_argument("--repetition", type=int, default=-1)
    p.add_argument("--output", "-o", default="similarity.fctn")
    p.set_defaults(func=cmd_export_sim)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, IndexError) as exc:  # FormatError is a ValueError
        print(f"fcvit: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
