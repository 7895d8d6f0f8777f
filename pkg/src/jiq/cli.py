"""Command-line front end: ``jiq {simulate,fluid,equilibrium,formula,table,sweep}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from . import des, fluid, harness
from .model import AssignmentPolicy, ConfigError, IQueueDiscipline, SystemConfig

EXIT_CONFIG = 2
EXIT_RUNTIME = 1


def _lambda_list(text: str) -> list[float]:
    if text.strip() == "table":
        return list(harness.TABLE_LAMBDAS)
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers or 'table', got {text!r}")


def _system_args() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("system")
    g.add_argument("--lambda", dest="lam", type=float, help="per-server arrival rate, 0 < lambda < 1")
    g.add_argument("--r", type=float, default=None,
                   help="servers per dispatcher (default 10, or servers/dispatchers when those are given)")
    g.add_argument("--servers", type=int, help="number of servers n (simulation)")
    g.add_argument("--dispatchers", type=int, help="number of dispatchers m (simulation)")
    g.add_argument("--policy", choices=[p.value for p in AssignmentPolicy], default="jiq-random")
    g.add_argument("--discipline", choices=[d.value for d in IQueueDiscipline], default=None,
                   help="I-queue order (default fcfs; not allowed with supermarket)")
    g.add_argument("--z", type=int, default=0, help="early-join threshold")
    g.add_argument("--d", type=int, default=None, help="probes per decision (default 2 for jiq-sqd and supermarket)")
    return p


def _fluid_args() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("fluid integration")
    g.add_argument("--step", type=float, default=0.01)
    g.add_argument("--t-end", type=float, default=10000.0)
    g.add_argument("--imax", type=int, help="I-queue length truncation (default: sized from the equilibrium)")
    g.add_argument("--cmax", type=int, help="job count truncation (default: sized from the equilibrium)")
    g.add_argument("--trajectory", help="write the observed trajectory to this CSV (fluid only)")
    return p


def _sim_args() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("simulation")
    g.add_argument("--horizon", type=float, default=10000.0)
    g.add_argument("--warmup", type=float, default=5000.0)
    g.add_argument("--trials", type=int, help="independent trials (default from --tier)")
    g.add_argument("--seed", type=int, default=0, help="master seed")
    g.add_argument("--tier", choices=list(harness.TIERS), default="desk",
                   help="default servers, dispatchers and trials: desk 1000/100/50, full 10000/1000/1000")
    g.add_argument("--records", help="write the job records of trial 0 to this CSV (simulate only)")
    return p


def _output_args() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--output", help="CSV destination (default stdout)")
    return p


def build_parser() -> argparse.ArgumentParser:
    system, fl, sim, out = _system_args(), _fluid_args(), _sim_args(), _output_args()
    parser = argparse.ArgumentParser(prog="jiq", description="Join-Idle-Queue load balancing experiments.",
                                     allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[system, sim, out], allow_abbrev=False,
                   help="discrete-event simulation of a finite system")
    sub.add_parser("fluid", parents=[system, fl, out], allow_abbrev=False,
                   help="integrate the fluid model with forward Euler")
    eq = sub.add_parser("equilibrium", parents=[system, out], allow_abbrev=False,
                        help="solve the JIQ-Random fixed point")
    eq.add_argument("--imax", type=int)
    eq.add_argument("--cmax", type=int)
    sub.add_parser("formula", parents=[system, out], allow_abbrev=False,
                   help="closed-form mean time of the original analysis")
    tab = sub.add_parser("table", parents=[sim, out], allow_abbrev=False, help="reproduce one result table")
    tab.add_argument("--table", type=int, required=True, choices=sorted(harness.TABLE_COLUMNS))
    tab.add_argument("--r", type=float, default=10.0)
    tab.add_argument("--grid", type=_lambda_list, help="lambda values (default: the table grid)")
    tab.add_argument("--sources", help="comma-separated subset of " + ",".join(harness.SOURCES))
    sw = sub.add_parser("sweep", parents=[system, fl, sim, out], allow_abbrev=False,
                        help="repeat one mode over a lambda grid")
    sw.add_argument("--mode", required=True, choices=[m for m in harness.MODES if m != "table"])
    sw.add_argument("--grid", type=_lambda_list, required=True,
                    help="comma-separated lambda values, or 'table' for the table grid")
    return parser


def _config(args, mode: str, lam: float | None) -> SystemConfig:
    if lam is None:
        raise ConfigError("missing-lambda", "--lambda is required")
    policy = AssignmentPolicy(args.policy)
    d = args.d if args.d is not None else (1 if policy is AssignmentPolicy.JIQ_RANDOM else 2)
    n, m, r = args.servers, args.dispatchers, args.r
    if mode == "simulate" and n is None and m is None:
        n, m = harness.TIERS[args.tier].n, harness.TIERS[args.tier].m
    if r is None and n is None:
        r = 10.0
    discipline = IQueueDiscipline(args.discipline) if args.discipline else None
    return SystemConfig(lam=lam, r=r, n=n, m=m, policy=policy, discipline=discipline, z=args.z, d=d)


def _spec(args, mode: str, lam: float | None) -> harness.ExperimentSpec:
    cfg = _config(args, mode, lam)
    integration = None
    auto = False
    if mode == "fluid":
        try:
            integration = fluid.IntegrationSettings(step=args.step, t_end=args.t_end,
                                                    i_max=args.imax or 128, c_max=args.cmax or 128)
        except ValueError as exc:
            raise ConfigError("bad-integration", str(exc)) from exc
        auto = args.imax is None or args.cmax is None
        if auto and (args.imax or args.cmax):
            raise ConfigError("partial-truncation", "give both --imax and --cmax, or neither")
    trials = getattr(args, "trials", None)
    tier = getattr(args, "tier", "desk")
    return harness.ExperimentSpec(
        mode=mode, cfg=cfg, integration=integration,
        trials=harness.TIERS[tier].trials if trials is None else trials,
        seed=getattr(args, "seed", 0), warmup=getattr(args, "warmup", 5000.0),
        horizon=getattr(args, "horizon", 10000.0), tier=tier, output_path=args.output, auto_truncate=auto,
    )


def _describe(spec: harness.ExperimentSpec, **extra) -> dict:
    out = {"mode": spec.mode}
    cfg = spec.cfg
    if cfg is not None:
        out.update(policy=cfg.policy.value, discipline=cfg.discipline.value if cfg.discipline else None,
                   z=cfg.z, d=cfg.d, r=cfg.r, servers=cfg.n, dispatchers=cfg.m)
    if spec.mode == "simulate":
        out.update(trials=spec.trials, seed=spec.seed, horizon=spec.horizon, warmup=spec.warmup, tier=spec.tier)
    if spec.mode == "fluid" and spec.integration is not None:
        st = spec.integration
        out.update(step=st.step, t_end=st.t_end,
                   imax="auto" if spec.auto_truncate else st.i_max,
                   cmax="auto" if spec.auto_truncate else st.c_max)
    out.update(extra)
    out["output"] = spec.output_path or "-"
    return out


def _announce(config: dict) -> None:
    print("config: " + json.dumps(config), file=sys.stderr, flush=True)


def _write(rows, path) -> None:
    if path:
        harness.emit_csv(rows, path)
    else:
        harness.write_rows(rows, sys.stdout)
        sys.stdout.flush()


def _run_single_command(args) -> None:
    spec = _spec(args, args.command, args.lam)
    if args.command == "equilibrium" and (args.imax is None) != (args.cmax is None):
        raise ConfigError("partial-truncation", "give both --imax and --cmax, or neither")
    spec = spec.validate()
    extra = {"lambda": spec.cfg.lam}
    if spec.mode == "fluid":
        settings = harness.resolved_settings(spec)
        spec = dataclasses.replace(spec, integration=settings, auto_truncate=False)
    if spec.mode == "equilibrium":
        i_max, c_max = (args.imax, args.cmax) if args.imax else harness.auto_truncation(spec.cfg.lam, spec.cfg.r)
        extra.update(imax=i_max, cmax=c_max)
    _announce(_describe(spec, **extra))
    if spec.mode == "equilibrium":
        rows = harness.equilibrium_rows(spec.cfg, i_max, c_max)
    else:
        rows = harness.run_single(spec, record_path=getattr(args, "records", None),
                                  trajectory_path=getattr(args, "trajectory", None))
    _write(rows, args.output)


def _run_sweep(args) -> None:
    grid = args.grid
    if not grid:
        _announce({"mode": "sweep", "sweep_mode": args.mode, "grid": [], "output": args.output or "-"})
        _write([], args.output)
        return
    spec = _spec(args, args.mode, grid[0]).validate()
    for lam in grid[1:]:
        dataclasses.replace(spec, cfg=dataclasses.replace(spec.cfg, lam=lam)).validate()
    _announce(_describe(spec, mode="sweep", sweep_mode=args.mode, grid=grid))
    _write(harness.run_sweep(spec, grid), args.output)


def _run_table(args) -> None:
    sources = None
    if args.sources:
        sources = [s.strip() for s in args.sources.split(",") if s.strip()]
        bad = sorted(set(sources) - set(harness.SOURCES))
        if bad:
            raise ConfigError("bad-source", f"unknown sources {', '.join(bad)}; choose from {', '.join(harness.SOURCES)}")
    spec = harness.ExperimentSpec(mode="table", table_id=args.table, tier=args.tier, seed=args.seed,
                                  horizon=args.horizon, warmup=args.warmup, output_path=args.output).validate()
    tier = harness.TIERS[args.tier]
    lambdas = list(harness.TABLE_LAMBDAS) if args.grid is None else args.grid
    trials = tier.trials if args.trials is None else args.trials
    if trials < 1:
        raise ConfigError("bad-trials", f"trials must be >= 1, got {trials}")
    _announce({"mode": "table", "table": args.table, "tier": args.tier, "servers": tier.n,
               "dispatchers": tier.m, "trials": trials, "seed": args.seed, "r": args.r, "horizon": args.horizon,
               "warmup": args.warmup, "grid": lambdas, "sources": sources or list(harness.SOURCES),
               "step": 0.01, "t_end": 10000.0, "imax": "auto", "cmax": "auto", "output": args.output or "-"})
    rows = harness.run_table(spec.table_id, spec.tier, lambdas=lambdas, trials=trials, seed=args.seed, r=args.r,
                             sources=sources, horizon=args.horizon, warmup=args.warmup,
                             progress=lambda msg: print(msg, file=sys.stderr, flush=True))
    _write(rows, args.output)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "table":
            _run_table(args)
        elif args.command == "sweep":
            _run_sweep(args)
        else:
            _run_single_command(args)
    except ConfigError as exc:
        print(f"jiq: invalid configuration ({exc.code}): {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ArithmeticError, ValueError, des.SimulationError, fluid.InconsistentStateError) as exc:
        print(f"jiq: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
