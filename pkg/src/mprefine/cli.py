"""Command-line front end: generate, train, eval, gradcheck.

Exit codes: 0 success, 1 usage error, 2 validation failure (bad config,
mismatched or malformed files, failed gradient check), 3 numeric failure
(non-finite values during optimization).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

from . import model_io, training
from ._fileio import atomic_write_text
from .config import ConfigError, ModelConfig, load_config
from .evaluate import evaluate, feature_matrix, format_eval_report, save_features
from .data import (
    DataError,
    SynthSpec,
    generate_synthetic,
    load_dataset,
    save_dataset,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="mprefine", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic dataset file")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--num-instances", type=int, default=1000)
    gen.add_argument("--persons", default=None, help="MIN:MAX active persons per frame")
    gen.add_argument("--noise-sigma", type=float, default=0.5)
    gen.add_argument("--dependency-strength", type=float, default=1.0)
    gen.add_argument("--table-peak", type=float, default=0.8,
                     help="probability mass on each scene's characteristic action")
    gen.add_argument("--pose-coherence", default="0.5",
                     help="probability all persons share a pose; one value or one per scene")
    gen.add_argument("--seed", type=int, default=None)

    tr = sub.add_parser("train", help="train a model on a dataset file")
    tr.add_argument("--config", required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--log", default=None, help="training log path (default: <out>.log)")
    tr.add_argument("--seed", type=int, default=None)

    ev_p = sub.add_parser("eval", help="evaluate a model file on a dataset file")
    ev_p.add_argument("--model", required=True)
    ev_p.add_argument("--data", required=True)
    ev_p.add_argument("--config", default=None,
                      help="optional config file to cross-validate against the model")
    ev_p.add_argument("--per-step", action="store_true")
    ev_p.add_argument("--export-features", default=None)
    ev_p.add_argument("--step", type=int, default=None,
                      help="which step's features to export (default: last)")

    gc = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    gc.add_argument("--config", required=True)
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--trials", type=int, default=3)
    gc.add_argument("--seed", type=int, default=None)
    return parser


def _with_seed(cfg: ModelConfig, seed) -> ModelConfig:
    if seed is None:
        return cfg
    return dataclasses.replace(cfg, rng_seed=seed)


def _parse_persons(arg: str | None, cfg: ModelConfig) -> tuple[int, int]:
    if arg is None:
        return (1, cfg.max_persons)
    parts = arg.split(":")
    if len(parts) != 2:
        raise UsageError(f"--persons expects MIN:MAX, got {arg!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise UsageError(f"--persons expects integers, got {arg!r}") from None


def _action_table(cfg: ModelConfig, peak: float) -> np.ndarray:
    """Each scene concentrates on one characteristic action."""
    num_g, num_h = cfg.num_scenes, cfg.num_actions
    if not 0.0 < peak <= 1.0:
        raise UsageError(f"--table-peak must be in (0, 1], got {peak}")
    if num_h == 1:
        return np.ones((num_g, 1))
    table = np.full((num_g, num_h), (1.0 - peak) / (num_h - 1))
    for g in range(num_g):
        table[g, g % num_h] = peak
    return table


def _coherence(arg: str, cfg: ModelConfig) -> np.ndarray:
    try:
        values = [float(v) for v in arg.split(",")]
    except ValueError:
        raise UsageError(f"--pose-coherence expects floats, got {arg!r}") from None
    if len(values) == 1:
        return np.full(cfg.num_scenes, values[0])
    if len(values) != cfg.num_scenes:
        raise UsageError(
            f"--pose-coherence needs 1 or {cfg.num_scenes} values, got {len(values)}"
        )
    return np.array(values)


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    spec = SynthSpec(
        num_instances=args.num_instances,
        persons_range=_parse_persons(args.persons, cfg),
        noise_sigma=args.noise_sigma,
        dependency_strength=args.dependency_strength,
        scene_action_table=_action_table(cfg, args.table_peak),
        pose_coherence=_coherence(args.pose_coherence, cfg),
    )
    seed = args.seed if args.seed is not None else cfg.rng_seed
    ds = generate_synthetic(spec, cfg, seed)
    save_dataset(ds, args.out, cfg)
    print(f"wrote {len(ds)} instances to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _with_seed(load_config(args.config), args.seed)
    ds = load_dataset(args.data, cfg)
    state = training.train(ds, cfg)
    model_io.save_model(args.out, state.params, cfg)
    log_path = args.log if args.log is not None else args.out + ".log"
    atomic_write_text(log_path, training.format_training_log(state.history))
    last = state.history[-1] if state.history else None
    if last is not None:
        print(
            f"trained {cfg.num_steps}-step model for {state.epochs_run} epochs; "
            f"final train scene accuracy {last['acc_scene']:.4f}"
        )
    print(f"wrote model to {args.out}, log to {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    expected = load_config(args.config) if args.config is not None else None
    params, cfg = model_io.load_model(args.model, expected_cfg=expected)
    ds = load_dataset(args.data, cfg)
    report = evaluate(ds, params, cfg)
    sys.stdout.write(format_eval_report(report, per_step=args.per_step))
    if args.export_features is not None:
        step_k = args.step if args.step is not None else cfg.num_steps
        features, labels = feature_matrix(ds, params, cfg, step_k)
        save_features(args.export_features, features, labels)
        print(f"wrote {features.shape[0]} feature rows to {args.export_features}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise UsageError("trials must be >= 1")
    cfg = _with_seed(load_config(args.config), args.seed)
    report = training.grad_check(cfg, tolerance=args.tol, epsilon=args.eps, trials=args.trials)
    print(
        f"checked {report.num_coordinates} coordinates over {report.trials} trials: "
        f"max relative error {report.max_rel_error:.3e} (tolerance {report.tolerance:g})"
    )
    if report.passed:
        print("gradcheck PASS")
        return EXIT_OK
    worst = sorted(report.failures, key=lambda f: -f.rel_error)[:10]
    print(f"gradcheck FAIL: {len(report.failures)} coordinates over tolerance; worst:")
    for f in worst:
        print(
            f"  {f.coordinate}: analytic {f.analytic:.6e} vs numeric {f.numeric:.6e} "
            f"(rel {f.rel_error:.3e})"
        )
    return EXIT_VALIDATION


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    handlers = {
        "generate": cmd_generate,
        "train": cmd_train,
        "eval": cmd_eval,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConfigError, DataError, model_io.ModelFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except training.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
