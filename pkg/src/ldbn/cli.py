"""Command-line driver: pretrain, generate, adapt, eval, gradcheck.

Exit codes: 0 success, 1 usage or I/O error, 2 file format error,
3 pretraining did not reach its target accuracy.
"""

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from . import gradcheck
from .adapt import AdaptConfig
from .errors import FormatError, LDBNError
from .harness import (DeadlineBudget, FakeClock, UsageError, parse_config, run_stream,
                      write_rows, write_stream_csv)
from .scenario import SHIFT_PROFILES, ScenarioSpec, generate_dataset, load_dataset, render_frame
from .train import VAL_INDEX_OFFSET, PretrainConfig, evaluate, pretrain
from .weights import load_weights, save_weights

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NONCONVERGED = 0, 1, 2, 3
SEED_ENV = "LDBN_SEED"
DATASET_KEYS = ("train_dataset", "val_dataset")

log = logging.getLogger("ldbn")


def _env_seed(default):
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _stack(frames):
    return np.stack([f.image for f in frames]), np.stack([f.label for f in frames])


def load_pretrain_config(path):
    with open(path) as fh:
        values = parse_config(fh.read(), PretrainConfig, optional=DATASET_KEYS)
    paths = {k: values.pop(k) for k in DATASET_KEYS if k in values}
    cfg = PretrainConfig(**values)
    cfg = dataclasses.replace(cfg, seed=_env_seed(cfg.seed))
    return cfg, paths


def cmd_pretrain(args):
    cfg, paths = load_pretrain_config(args.config)
    spec = ScenarioSpec(lanes=cfg.lanes, rng_seed=cfg.seed)
    if "train_dataset" in paths:
        spec, frames = load_dataset(paths["train_dataset"])
        train_x, train_y = _stack(frames)
    else:
        train_x, train_y = _stack([render_frame(spec, i) for i in range(cfg.train_frames)])
    if "val_dataset" in paths:
        _, frames = load_dataset(paths["val_dataset"])
        val_x, val_y = _stack(frames)
    else:
        val_x, val_y = _stack([render_frame(spec, VAL_INDEX_OFFSET + i)
                               for i in range(cfg.val_frames)])

    def show(row):
        print(f"epoch {row['epoch']:3d}  loss {row['loss']:.4f}  "
              f"val_accuracy {row['val_accuracy']:.4f}", flush=True)

    result = pretrain(cfg, train_x, train_y, val_x, val_y, spec.grid, on_epoch=show)
    save_weights(result.model, args.out)
    if args.log:
        write_rows(args.log, ("epoch", "loss", "val_accuracy"), result.history)
    bn, total = result.model.count_params()
    print(f"bn_affine parameters {bn} of {total} ({100 * bn / total:.3f}%)")
    if not result.converged:
        print(f"error: val accuracy {result.val_accuracy:.4f} below target "
              f"{cfg.target_accuracy} after {cfg.max_epochs} epochs", file=sys.stderr)
        return EXIT_NONCONVERGED
    print(f"converged: val_accuracy {result.val_accuracy:.4f} after {result.epochs} epoch(s)")
    return EXIT_OK


def cmd_generate(args):
    seed = args.seed if args.seed is not None else _env_seed(0)
    spec = ScenarioSpec(lanes=args.lanes, rng_seed=seed).with_profile(args.profile)
    generate_dataset(spec, args.frames, args.out, start=args.start)
    print(f"wrote {args.frames} frames ({args.profile}) to {args.out}")
    return EXIT_OK


def cmd_adapt(args):
    if args.bs not in (1, 2, 4):
        raise UsageError("--bs must be 1, 2 or 4")
    model = load_weights(args.weights)
    seed = args.seed if args.seed is not None else _env_seed(0)
    c, h, w = model.input_shape
    lanes = model.output_shape[2]
    spec = ScenarioSpec(lanes=lanes, width=w, height=h, grid_cells=model.output_shape[0] - 1,
                        row_anchors=model.output_shape[1], rng_seed=seed)
    spec = spec.with_profile(args.profile)
    frames = (render_frame(spec, i) for i in range(args.frames))
    config = AdaptConfig(batch_size=args.bs, learning_rate=args.lr, momentum=args.momentum)
    budget = DeadlineBudget(args.fps)
    clock = FakeClock(step_ns=int(args.fake_clock_ms * 1e6 / 2)) if args.fake_clock_ms else None
    kwargs = {"clock": clock} if clock else {}
    report = run_stream(model, frames, config, budget, posthoc=args.posthoc,
                        frozen_baseline=True, **kwargs)
    write_stream_csv(report, args.report)
    for key, value in report.summary().items():
        print(f"{key:18s} {value if value is None or isinstance(value, int) else f'{value:.6g}'}")
    return EXIT_OK


def cmd_eval(args):
    model = load_weights(args.weights)
    spec, frames = load_dataset(args.dataset)
    if not frames:
        raise UsageError(f"{args.dataset} contains no frames")
    images, labels = _stack(frames)
    acc = evaluate(model, images, labels, spec.grid)
    if args.report:
        write_rows(args.report, ("frame_idx", "accuracy"),
                   [{"frame_idx": i, "accuracy": float(a)} for i, a in enumerate(acc)])
    print(f"frames {len(frames)}  accuracy {acc.mean():.6f}")
    return EXIT_OK


def cmd_gradcheck(args):
    results = gradcheck.run_gradcheck(seed=args.seed, trials=args.trials)
    print(gradcheck.format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_USAGE


def build_parser():
    p = argparse.ArgumentParser(prog="ldbn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="train the reference model on source frames")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="weights file to write")
    s.add_argument("--log", help="optional per-epoch CSV")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("generate", help="write an LDDS dataset")
    s.add_argument("--profile", default="source", choices=sorted(SHIFT_PROFILES))
    s.add_argument("--frames", type=int, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--start", type=int, default=0, help="index of the first frame")
    s.add_argument("--lanes", type=int, default=2, choices=(2, 4))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("adapt", help="stream frames with real-time adaptation")
    s.add_argument("--weights", required=True)
    s.add_argument("--profile", default="night", choices=sorted(SHIFT_PROFILES))
    s.add_argument("--bs", type=int, default=1)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--momentum", type=float, default=0.9)
    s.add_argument("--fps", type=float, default=30.0)
    s.add_argument("--frames", type=int, default=500)
    s.add_argument("--seed", type=int)
    s.add_argument("--report", required=True, help="per-frame CSV to write")
    s.add_argument("--posthoc", action="store_true",
                   help="also score the final model on the whole stream")
    s.add_argument("--fake-clock-ms", type=float, default=None,
                   help="replace the wall clock with a fixed per-frame duration")
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("eval", help="frozen-model accuracy on an LDDS dataset")
    s.add_argument("--weights", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every backward kernel")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trials", type=int, default=100)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except (UsageError, LDBNError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
