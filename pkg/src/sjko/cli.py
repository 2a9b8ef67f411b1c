"""Command-line interface.

Subcommands: ``train``, ``sample``, ``eval``, ``ou-bench``, ``selfcheck``.
Exit codes: 0 success, 2 usage/config problems, 3 numeric failures.  The
``SJKO_THREADS`` environment variable bounds ou-bench worker parallelism.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import metrics
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, load_run_config, run_config_from_sections
from .datasets import ParticleCloud, load_cloud_csv
from .experiments import (BENCH_METHODS, ou_bench, resume_training,
                          run_training, write_csv)
from .nets import TransportRef
from .trainer import TrainingError, sample_pushforward

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sjko",
        description="Gradient-flow generative modeling via per-phase semi-dual training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training experiment")
    p_train.add_argument("--config", help="TOML config file")
    p_train.add_argument("--task", choices=("two-circles", "gmm25", "ou"))
    p_train.add_argument("--method", choices=("sjko", "uotm", "uotm-source-fixed"))
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--checkpoint", help="resume from a phase checkpoint")

    p_sample = sub.add_parser("sample", help="sample from a checkpointed transport")
    p_sample.add_argument("--checkpoint", required=True)
    p_sample.add_argument("--n", type=int, required=True)
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--out", required=True, help="output CSV file")

    p_eval = sub.add_parser("eval", help="score a sample cloud against its task")
    p_eval.add_argument("--task", required=True, choices=("two-circles", "gmm25"))
    p_eval.add_argument("--samples", required=True, help="cloud CSV to score")
    p_eval.add_argument("--out", help="optional metrics CSV")

    p_bench = sub.add_parser("ou-bench", help="reference-process accuracy benchmark")
    p_bench.add_argument("--dim", type=int, default=2)
    p_bench.add_argument("--times", default="0.5,0.9", help="comma-separated times")
    p_bench.add_argument("--methods", default="analytic,em,sjko",
                         help=f"comma-separated subset of {','.join(BENCH_METHODS)}")
    p_bench.add_argument("--seeds", default="0", help="comma-separated training seeds")
    p_bench.add_argument("--process-seed", type=int, default=0)
    p_bench.add_argument("--out", required=True, help="output directory")

    sub.add_parser("selfcheck", help="run the numeric correctness battery")
    return parser


def cmd_train(args) -> int:
    if args.checkpoint:
        out = resume_training(args.checkpoint, args.out)
    else:
        cfg = load_run_config(args.config, task=args.task, seed=args.seed,
                              method=args.method, out_dir=args.out)
        out = run_training(cfg, args.out)
    print(f"run complete: {out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    data = load_checkpoint(args.checkpoint)
    cfg = run_config_from_sections(data.config_sections)
    transport = TransportRef(spec=data.transport_spec(), params=data.transport_params())

    from .experiments import build_samplers
    from .rng import StreamRng
    from .trainer import mix_seed

    source, _, _ = build_samplers(cfg)
    rng = StreamRng(mix_seed(cfg.jko.seed, 7), stream=args.seed)
    x = source(args.n, rng)
    z = None
    if cfg.jko.aux_noise_dim > 0:
        z = rng.normal_matrix(args.n, cfg.jko.aux_noise_dim)
    cloud = ParticleCloud(transport.apply(x, z), origin="pushforward", seed=args.seed)
    cloud.save_csv(args.out)
    print(f"wrote {args.n} samples to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cloud = load_cloud_csv(args.samples)
    if cloud.dim != 2:
        raise ConfigError(f"{args.samples}: expected 2D samples, got d={cloud.dim}")
    if args.task == "gmm25":
        report = metrics.mode_coverage(cloud)
        rows = [["captured_modes", float(report.captured_modes)],
                ["high_quality_fraction", report.high_quality_fraction],
                ["capture_radius", report.capture_radius],
                ["capture_min", float(report.capture_min)]]
    else:
        frac, shares = metrics.ring_fraction(cloud)
        rows = [["ring_fraction", frac],
                ["inner_share", shares[0]],
                ["outer_share", shares[1]]]
    for name, value in rows:
        print(f"{name} = {value:.6g}")
    if args.out:
        write_csv(args.out, ["metric", "value"], rows)
    return EXIT_OK


def _parse_list(raw: str, cast):
    items = [part.strip() for part in raw.split(",") if part.strip()]
    if not items:
        raise ConfigError(f"empty list argument: {raw!r}")
    return [cast(part) for part in items]


def cmd_ou_bench(args) -> int:
    times = _parse_list(args.times, float)
    methods = _parse_list(args.methods, str)
    seeds = _parse_list(args.seeds, int)
    rows = ou_bench(args.dim, times, methods, seeds, args.out,
                    process_seed=args.process_seed)
    for method, d, t, value, log_value, seed in rows:
        print(f"{method:10s} d={d} t={t:.3g} seed={seed}: "
              f"sym_kl={value:.6g} log10={log_value:.3f}")
    print(f"wrote {Path(args.out) / 'results.csv'}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    results = run_selfcheck()
    failures = 0
    for name, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        failures += 0 if ok else 1
    if failures:
        print(f"{failures} of {len(results)} checks failed")
        return EXIT_NUMERIC
    print(f"all {len(results)} checks passed")
    return EXIT_OK


_COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ou-bench": cmd_ou_bench,
    "selfcheck": cmd_selfcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except TrainingError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, FileNotFoundError, IsADirectoryError,
            ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
