"""Command-line front end.

Exit codes: 0 on success, 1 on a configuration or usage error, 2 when a run
breaks one of its invariant checks.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import engine
from .esa import InvariantViolationError
from .mesa import mesa_capacity
from .metrics import metrics_csv, metrics_json
from .model import (ConfigError, check_rate_properties, dumps_config, load_raw,
                    resolve_config_path, validate_and_derive)
from .oracle import InstanceTooLarge, compute_upper_bound

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ehsched", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_arg(sp):
        sp.add_argument("--config", required=True, metavar="PATH",
                        help="TOML config, or the name of a bundled scenario")

    sp = sub.add_parser("validate", help="validate a config and print derived parameters")
    config_arg(sp)
    sp.add_argument("--v", type=float, help="V used for the derived parameters")
    sp.add_argument("--dump", action="store_true", help="print the normalized config")

    for name, help_ in (("run", "simulate one seeded run"), ("sweep", "run a grid of V and seeds")):
        sp = sub.add_parser(name, help=help_)
        config_arg(sp)
        sp.add_argument("--policy", choices=engine.POLICIES, default="esa")
        sp.add_argument("--horizon", type=int, default=engine.DEFAULT_HORIZON)
        sp.add_argument("--phase1-t", type=int, help="Phase I length for mesa (default 50 V)")
        sp.add_argument("--out", type=Path, help="CSV file, one row per run")
        sp.add_argument("--json", type=Path, help="JSON report with the same fields")
        if name == "run":
            sp.add_argument("--v", type=float, help="tradeoff parameter (default from config)")
            sp.add_argument("--seed", type=int, default=0)
            sp.add_argument("--trace", type=Path, help="CSV file of per-slot queue states")
            sp.add_argument("--trace-stride", type=int, default=1)
        else:
            sp.add_argument("--v-list", type=_csv_floats, required=True, metavar="CSV")
            sp.add_argument("--seeds", type=_csv_ints, default=[0], metavar="CSV")
            sp.add_argument("--workers", type=int, default=1)

    sp = sub.add_parser("bound", help="upper bound on achievable total utility")
    config_arg(sp)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.add_argument("--out", type=Path, help="JSON report")

    sp = sub.add_parser("check-model", help="check the rate-power model and random processes")
    config_arg(sp)
    sp.add_argument("--samples", type=int, default=2000)
    sp.add_argument("--seed", type=int, default=0)
    return p


def _load(args, V=None):
    raw = load_raw(args.config)
    return validate_and_derive(raw, V)


def _fmt(x) -> str:
    if isinstance(x, np.ndarray):
        vals = np.unique(x)
        return f"{vals[0]:g}" if vals.size == 1 else "[" + ", ".join(f"{v:g}" for v in x) + "]"
    return f"{x:g}"


def cmd_validate(args) -> int:
    graph, params, config = _load(args, args.v)
    print(f"config: {resolve_config_path(args.config)}")
    print(f"nodes {graph.n_nodes}, links {graph.n_links}, commodities {len(config.commodities)}, "
          f"destinations {len(config.dests)}")
    for key in ("V", "beta", "delta", "p_max", "mu_max", "r_max", "h_max", "d_max", "gamma",
                "theta", "q_bound", "e_bound"):
        print(f"  {key:8s} {_fmt(getattr(params, key))}")
    try:
        print(f"  {'M':8s} {mesa_capacity(params.V, max(params.p_max, params.h_max)):g}")
    except ConfigError as exc:
        print(f"  M        unusable at this V ({exc})")
    if args.dump:
        print(dumps_config(config), end="")
    return EXIT_OK


def _write(path: Path | None, text: str):
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)


def _summary(m) -> str:
    line = (f"{m.policy} V={m.V:g} seed={m.seed} horizon={m.horizon}: utility {m.utility:.6f} "
            f"backlog {m.backlog:.3f} energy {m.energy_avg:.3f} violations {m.violations}")
    if m.policy == "mesa":
        line += (f" drops {m.drops:g} of {m.admitted:.6g} admitted, virtual backlog "
                 f"{m.virtual_backlog:.3f}, masked deficits {m.masked_deficits}")
    return line + f" ({m.wall_clock:.2f}s)"


def cmd_run(args) -> int:
    _, params, config = _load(args, args.v)
    stride = args.trace_stride if args.trace else 0
    if args.trace and args.trace_stride < 1:
        raise ConfigError("--trace-stride", "must be >= 1")
    m, trace = engine.run(config, args.policy, params.V, args.horizon, args.seed,
                          trace_stride=stride, phase1_t=args.phase1_t)
    print(_summary(m))
    _write(args.out, metrics_csv([m]))
    _write(args.json, metrics_json([m]))
    if trace is not None:
        _write(args.trace, trace.to_csv())
    return EXIT_OK


def cmd_sweep(args) -> int:
    _, _, config = _load(args)
    if not args.v_list:
        raise ConfigError("--v-list", "needs at least one value")
    res = engine.sweep(config, args.policy, args.v_list, args.horizon, args.seeds,
                       args.phase1_t, workers=args.workers)
    for m in res.rows:
        print(_summary(m))
    for name, fit in res.fits.items():
        print(f"fit {name}: slope {fit.slope:.6g} intercept {fit.intercept:.6g} R2 {fit.r2:.4f}")
    _write(args.out, metrics_csv(res.rows))
    _write(args.json, metrics_json(res.rows, {"fits": {k: f.to_json() for k, f in res.fits.items()}}))
    return EXIT_OK


def cmd_bound(args) -> int:
    _, _, config = _load(args)
    res = compute_upper_bound(config, tolerance=args.tolerance)
    print(f"utility bound {res.bound:.6f} (attained {res.value:.6f}, gap {res.gap:.2e}, "
          f"{res.iterations} iterations)")
    print("rates " + " ".join(f"{r:.6f}" for r in res.rates))
    _write(args.out, json.dumps({"bound": res.bound, "value": res.value, "gap": res.gap,
                                 "iterations": res.iterations, "rates": res.rates.tolist()},
                                indent=2, sort_keys=True))
    return EXIT_OK


def cmd_check_model(args) -> int:
    _, params, config = _load(args)
    report = check_rate_properties(config.rate_power, args.samples, args.seed)
    for proc, label in ((config.channel_process(), "channel"), (config.energy_process(), "energy")):
        pi = proc.stationary()
        print(f"{label} process: {proc.kind}, {proc.n_states} states x {proc.copies} copies, "
              f"stationary {np.round(pi, 6).tolist()}")
    print(f"rate model: {config.rate_power.kind}, {config.rate_power.n_actions} joint actions, "
          f"{report.checked} (channel, action) pairs checked")
    for v in report.violations:
        print(f"  {v}")
    if not report.ok:
        print(f"rate model fails {len(report.violations)} checks")
        return EXIT_CONFIG
    print("rate model ok")
    return EXIT_OK


COMMANDS = {"validate": cmd_validate, "run": cmd_run, "sweep": cmd_sweep, "bound": cmd_bound,
            "check-model": cmd_check_model}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, InstanceTooLarge) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolationError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except engine.RunFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT if isinstance(exc.cause, InvariantViolationError) else EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
