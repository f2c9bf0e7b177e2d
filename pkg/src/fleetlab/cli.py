"""Command line front end.

Subcommands: train, eval, baseline, gen-data, report. Success exits 0 and
prints a JSON result to stdout; any failure exits nonzero with a one-line
JSON error record on stderr, so scripts can parse outcomes either way.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import datagen, harness, scenarios


class CLIError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of printing usage and exiting."""

    def error(self, message):
        raise CLIError(message)


def _scenario_flags(p, require_domain=True):
    p.add_argument("--domain", required=require_domain,
                   help="regional | hotcold | distribute | historical-orders | historical-stats")
    p.add_argument("--variant", help="demand level or distribute split")
    p.add_argument("--n-drivers", type=int, dest="n_drivers")
    p.add_argument("--data", dest="data_path", help="order CSV or rate-grid file")
    p.add_argument("--fixed-day", type=int, dest="fixed_day")
    p.add_argument("--simple-mode", action="store_true", dest="simple_mode")


def _source_flags(p):
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--policy", help="checkpoint path")
    group.add_argument("--baseline", help="baseline name, e.g. mpdm-demand")


def build_parser() -> _Parser:
    parser = _Parser(prog="fleetlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", parents=[], help="train a policy across seeds")
    train.add_argument("--config", help="key = value config file")
    train.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key (repeatable)")
    _scenario_flags(train, require_domain=False)
    train.add_argument("--algo", choices=("dqn", "ppo"))
    train.add_argument("--perspective", choices=("driver", "system"))
    train.add_argument("--seeds", help="e.g. '0 1 2 3'")
    train.add_argument("--budget", type=int, help="episodes (dqn) or epochs (ppo)")
    train.add_argument("--eval-every", type=int, dest="eval_every")
    train.add_argument("--eval-episodes", type=int, dest="eval_episodes")
    train.add_argument("--dtype", choices=("float64", "float32"))
    train.add_argument("--out", dest="out_dir", help="run directory")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint or baseline")
    _source_flags(ev)
    _scenario_flags(ev)
    ev.add_argument("--episodes", type=int, default=5)
    ev.add_argument("--out", help="optional JSON output path")
    ev.set_defaults(func=cmd_eval)

    base = sub.add_parser("baseline", help="run a named myopic baseline")
    base.add_argument("--name", required=True, help="e.g. mrm-simple, mpdm-demand")
    _scenario_flags(base)
    base.add_argument("--episodes", type=int, default=5)
    base.add_argument("--out", help="optional JSON output path")
    base.set_defaults(func=cmd_baseline)

    gen = sub.add_parser("gen-data", help="write a synthetic order history")
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--days", type=int, default=30)
    gen.add_argument("--daily-orders", type=float, default=2000.0, dest="daily_orders")
    gen.add_argument("--keep-fraction", type=float, default=1.0, dest="keep_fraction")
    gen.add_argument("--out", required=True, help="output directory")
    gen.set_defaults(func=cmd_gen_data)

    rep = sub.add_parser("report", help="emit the reposition arrow-field CSV")
    _source_flags(rep)
    _scenario_flags(rep)
    rep.add_argument("--episodes", type=int, default=5)
    rep.add_argument("--bins", type=int, default=10)
    rep.add_argument("--out", required=True, help="CSV output path")
    rep.set_defaults(func=cmd_report)
    return parser


def _emit(result: dict, out=None) -> int:
    text = json.dumps(result, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    print(text)
    return 0


def cmd_train(args) -> int:
    overrides: dict[str, str] = {}
    for kv in args.set:
        if "=" not in kv:
            raise CLIError(f"--set expects KEY=VALUE, got {kv!r}")
        key, _, value = kv.partition("=")
        overrides[key.strip()] = value.strip()
    for key in ("domain", "variant", "algo", "perspective", "seeds", "budget",
                "eval_every", "eval_episodes", "n_drivers", "data_path",
                "fixed_day", "dtype", "out_dir"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = str(value)
    if args.simple_mode:
        overrides["simple_mode"] = "true"
    config = harness.load_config(args.config, overrides)
    run_dir = harness.run_train(config)
    summary = json.loads((run_dir / "summary.json").read_text())
    summary["run_dir"] = str(run_dir)
    return _emit(summary)


def _eval_with(args, source) -> int:
    result = harness.run_eval(source, args.domain, args.variant, args.episodes,
                              args.n_drivers, args.data_path, args.fixed_day,
                              args.simple_mode)
    return _emit(result, args.out)


def cmd_eval(args) -> int:
    return _eval_with(args, args.policy or args.baseline)


def cmd_baseline(args) -> int:
    return _eval_with(args, args.name)


def cmd_gen_data(args) -> int:
    orders, rates = datagen.gen_synthetic_historical(
        args.seed, args.days, args.daily_orders, args.out, args.keep_fraction)
    return _emit({"orders": str(orders), "rates": str(rates)})


def cmd_report(args) -> int:
    scenario = scenarios.build_scenario(args.domain, args.variant, args.n_drivers,
                                        args.data_path, args.fixed_day,
                                        args.simple_mode)
    act, label = harness.make_actor(args.policy or args.baseline, scenario, args.domain)
    rows = harness.reposition_field(act, scenario, args.episodes, args.bins)
    harness.write_arrow_field(args.out, rows)
    return _emit({"source": label, "rows": len(rows), "out": args.out})


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.func(args)
    except Exception as exc:  # uniform error contract for scripting
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
