"""Command line entry point: ``train``, ``sweep``, ``replay`` and ``gradcheck``.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O error.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys

from .errors import ConfigError, IdxFormatError, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _cmd_train(args):
    from .harness import load_config, run_experiment

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    result = run_experiment(cfg)
    print(json.dumps(result.summary, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_sweep(args):
    from .harness import format_sweep_table, load_config, sweep_schedules

    cfg = load_config(args.config)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    schedules = [s for s in args.schedules.split(",") if s.strip()]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    table = sweep_schedules(cfg, schedules, seeds, jobs=args.jobs,
                            out_path=os.path.join(cfg.out_dir, "sweep.csv"))
    print(format_sweep_table(table))
    return EXIT_OK


def _cmd_replay(args):
    from .controller import ScheduleSpec, read_trace, replay_trace, write_trace

    losses = read_trace(args.trace)
    spec = ScheduleSpec.parse(args.schedule, len(losses))
    values = replay_trace(losses, spec, args.delta_s, args.filter_length, args.sigma)
    if args.out:
        write_trace(args.out, values)
    else:
        for v in values:
            print(repr(v))
    return EXIT_OK


def _cmd_gradcheck(args):
    from .checks import topology_grad_checks

    ok = True
    for name, report in topology_grad_checks(seed=args.seed):
        status = "PASS" if report.passed(args.tol) else "FAIL"
        ok &= status == "PASS"
        print(f"{status} {name:<28} max rel err {report.max_rel_error:.3e}  mean {report.mean_rel_error:.3e}"
              f"  ({report.checked} entries)")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser():
    parser = argparse.ArgumentParser(prog="dynreg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one experiment from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sweep", help="compare regularization schedules")
    p.add_argument("--config", required=True)
    p.add_argument("--schedules", default="fix:2,linear:3,dynamic,none")
    p.add_argument("--seeds", help="comma separated seeds (default: the config seed)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("replay", help="replay the strength controller over a loss trace")
    p.add_argument("--trace", required=True, help="text file, one loss per line")
    p.add_argument("--out", help="write s values here instead of stdout")
    p.add_argument("--schedule", default="dynamic")
    p.add_argument("--delta-s", type=float, default=0.0003)
    p.add_argument("--filter-length", type=int, default=501)
    p.add_argument("--sigma", type=float, default=0.4)
    p.set_defaults(func=_cmd_replay)

    p = sub.add_parser("gradcheck", help="finite-difference check of every block topology")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except IdxFormatError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
