"""Command-line entry point: ``mmtc-sim figure|sweep|detect``."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import amp, harness, noncoh
from .config import ConfigError, SystemConfig
from .model import draw_trial


def _parse_values(text: str) -> tuple:
    out = []
    for item in text.replace(",", " ").split():
        num = float(item)
        out.append(int(num) if num.is_integer() else num)
    if not out:
        raise argparse.ArgumentTypeError("empty value list")
    return tuple(out)


def _emit(report, out, fmt):
    if out:
        harness.export(report, out, fmt)
    else:
        text = harness.report_to_csv(report) if fmt == "csv" else harness.report_to_json(report)
        sys.stdout.write(text)


def _add_run_options(p):
    p.add_argument("--trials", type=int, help="trials per sweep point")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output file (default: stdout)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--parallelism", type=int, default=1, help="worker processes")


def _overrides(args):
    changes = {}
    if args.trials is not None:
        changes["n_trials"] = args.trials
    if args.seed is not None:
        changes["seed"] = args.seed
    return changes


def cmd_figure(args):
    scenario = harness.preset(args.id).replace(**_overrides(args))
    _emit(harness.run(scenario, args.parallelism), args.out, args.format)


def cmd_sweep(args):
    config = SystemConfig.from_file(args.config)
    algorithm = args.algorithm or ("mamp" if config.info_bits > 0 else "amp")
    options = {"decision": args.decision} if algorithm == "amp" else {}
    variant = harness.Variant(algorithm, algorithm, (), tuple(sorted(options.items())))
    scenario = harness.Scenario("sweep", config, args.param, args.values, (variant,), 2000, 0)
    scenario = scenario.replace(**_overrides(args))
    _emit(harness.run(scenario, args.parallelism), args.out, args.format)


def cmd_detect(args):
    config = SystemConfig.from_file(args.config)
    trial = draw_trial(config, args.seed)
    real = trial.realization
    eps = config.activity_prob
    if eps <= 0:
        raise ConfigError("detect needs activity_prob > 0")
    out = amp.amp_detect(trial.block, trial.book, trial.profile, eps / config.columns_per_device, config,
                         powers=real.powers)
    sys.stdout.write(amp.diagnostics_csv(out))
    truth = real.active_set
    if config.info_bits > 0:
        res = noncoh.mamp_detect(trial.block, trial.book, trial.profile, eps, config, powers=real.powers)
        found = res.support
        wrong = int(np.sum(res.decoded[truth] != real.messages[truth]))
        print(f"# M-AMP iterations: {res.iterations}, wrong messages among active: {wrong}")
    else:
        found = out.support
    missed = np.setdiff1d(truth, found)
    false = np.setdiff1d(found, truth)
    print(f"# active devices: {truth.tolist()}")
    print(f"# declared active: {np.asarray(found).tolist()}")
    print(f"# missed: {missed.tolist()}  false alarms: {false.tolist()}  final mu2: {out.noise_state:.6g}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmtc-sim", description="Grant-free massive MIMO access simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("figure", help="run a figure preset")
    p.add_argument("id", help=f"one of: {', '.join(harness.FIGURES)}")
    _add_run_options(p)
    p.set_defaults(func=cmd_figure)

    p = sub.add_parser("sweep", help="sweep one configuration field")
    p.add_argument("--config", required=True, help="key = value configuration file")
    p.add_argument("--param", required=True, help="configuration field to sweep")
    p.add_argument("--values", required=True, type=_parse_values, help="comma or space separated values")
    p.add_argument("--algorithm", choices=[a.value for a in harness.Algorithm if a.value.startswith(("amp", "mamp"))])
    p.add_argument("--decision", choices=[d.value for d in amp.Decision], default=amp.Decision.POSTERIOR.value)
    _add_run_options(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("detect", help="single trial with per-iteration diagnostics")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_detect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, OSError, ValueError, KeyError) as exc:
        print(f"mmtc-sim: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
