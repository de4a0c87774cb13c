"""Command line entry point: ``fedverify {run,gradcheck,synth,metrics-oracle}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time

import numpy as np

from . import __version__, data, metrics, nn
from .config import ConfigError, parse_config

log = logging.getLogger("fedverify")


def _cmd_run(args) -> int:
    from .experiment import emit_csv, run_experiment
    from .report import emit_plots

    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg, experiment=dataclasses.replace(cfg.experiment, seeds=(args.seed,))
        )
    if args.output is not None:
        cfg = dataclasses.replace(
            cfg, experiment=dataclasses.replace(cfg.experiment, output_dir=args.output)
        )
    start = time.perf_counter()
    bundle = run_experiment(cfg)
    paths = emit_csv(bundle, cfg.experiment.output_dir)
    paths += emit_plots(bundle, cfg.experiment.output_dir)
    if not args.quiet:
        for method, metric, mean, std, n in bundle.summary():
            if metric == "accuracy":
                print(f"{method:<14} accuracy {mean:.4f} +- {std:.4f} (n={n})")
        for path in paths:
            print(f"wrote {path}")
        print(f"elapsed {time.perf_counter() - start:.1f}s")
    if bundle.failures:
        for (method, seed), msg in sorted(bundle.failures.items()):
            print(f"error: {method} seed {seed}: {msg}", file=sys.stderr)
        return 1
    return 0


def gradcheck_suite(seeds: int, base_seed: int, input_size: int, tolerance: float,
                    pairs: int = 4, max_coords: int = 30):
    """Worst relative error per parameter block over several random models and batches."""
    model = nn.SiameseModel(input_size=input_size)
    worst: dict[str, float] = {}
    kinks: dict[str, int] = {}
    checked: dict[str, int] = {}
    for s in range(base_seed, base_seed + seeds):
        rng = np.random.default_rng(s)
        params = model.init_params(rng)
        batch = nn.random_pair_batch(model, pairs, rng)
        report = nn.gradcheck(model, params, batch, tolerance, max_coords=max_coords, seed=s)
        for key, err in report.errors.items():
            worst[key] = max(worst.get(key, 0.0), err)
            kinks[key] = kinks.get(key, 0) + report.kinks[key]
            checked[key] = checked.get(key, 0) + report.checked[key]
    return nn.GradcheckReport(worst, tolerance, checked, kinks)


def _cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    report = gradcheck_suite(args.seeds, args.seed or 0, args.input_size, args.tolerance)
    elapsed = time.perf_counter() - start
    if not args.quiet:
        print(f"gradcheck: Table-1 stack at {args.input_size}x{args.input_size}, "
              f"{args.seeds} seeds, h=1e-5, float64")
        for line in report.lines():
            print(line)
    print(f"worst {report.worst:.3e} tolerance {args.tolerance:.0e} "
          f"{'PASS' if report.passed else 'FAIL'} ({elapsed:.1f}s)")
    return 0 if report.passed else 1


def _cmd_synth(args) -> int:
    subjects = data.synth_generate(
        args.num_subjects, args.impressions, args.image_size, args.noise, args.seed or 0
    )
    paths = data.write_corpus(subjects, args.out_dir)
    if not args.quiet:
        print(f"wrote {len(paths)} images for {len(subjects)} subjects to {args.out_dir}")
    return 0


def metrics_oracle(trials: int, seed: int = 0, max_n: int = 200) -> list[str]:
    """Compare the fast metrics with the brute-force sweep; returns mismatch descriptions."""
    rng = np.random.default_rng(seed)
    problems = []
    for t in range(trials):
        n = int(rng.integers(2, max_n + 1))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = (0, 1)
        # rounding creates ties, which is where threshold handling goes wrong
        dist = np.round(rng.gamma(2.0, 1.0, size=n) + labels * rng.uniform(-1, 1), int(rng.integers(1, 4)))
        dist = np.abs(dist)
        scored = [metrics.ScoredPair(float(d), int(y)) for d, y in zip(dist, labels)]
        checks = {
            "roc": (metrics.roc_curve(scored), metrics.brute_roc(scored)),
            "eer": (metrics.eer(scored), metrics.brute_eer(scored)),
            "acc_eer": (metrics.verification_accuracy(scored, "eer_threshold"),
                        metrics.brute_accuracy(scored, "eer_threshold")),
            "acc_best": (metrics.verification_accuracy(scored, "best_accuracy"),
                         metrics.brute_accuracy(scored, "best_accuracy")),
        }
        for name, (fast, slow) in checks.items():
            if list(fast) != list(slow):
                problems.append(f"trial {t} (n={n}): {name} differs")
    return problems


def _cmd_metrics_oracle(args) -> int:
    problems = metrics_oracle(args.trials, args.seed or 0)
    for p in problems:
        print(p)
    print(f"metrics oracle: {args.trials} random sets, {len(problems)} mismatches "
          f"{'PASS' if not problems else 'FAIL'}")
    return 0 if not problems else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the seed(s)")
    common.add_argument("--output", default=None, help="output directory (run)")
    common.add_argument("--quiet", action="store_true", help="only print errors and verdicts")

    parser = argparse.ArgumentParser(prog="fedverify", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("run", parents=[common], help="run an experiment from a config file")
    p.add_argument("config")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of backprop")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--input-size", type=int, default=16)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic PGM corpus")
    p.add_argument("out_dir")
    p.add_argument("--num-subjects", type=int, default=100)
    p.add_argument("--impressions", type=int, default=8)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--noise", type=float, default=0.1)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("metrics-oracle", parents=[common], help="check metrics against brute force")
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(func=_cmd_metrics_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, data.CorpusError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
