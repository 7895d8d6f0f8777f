"""Experiment orchestration: result rows, table reproduction, sweeps and CSV output."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Iterable

from . import des, equilibrium, fluid
from .model import (AssignmentPolicy, ConfigError, IQueueDiscipline, SystemConfig, lu_formula,
                    validate_config)

TABLE_LAMBDAS = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.96, 0.97, 0.98, 0.99)
SOURCES = ("equilibrium", "formula", "ode", "sim")
MODES = ("simulate", "fluid", "equilibrium", "formula", "table")
CSV_HEADER = ("lambda", "variant", "metric", "value", "dispersion", "source")


@dataclass(frozen=True)
class Tier:
    n: int
    m: int
    trials: int


TIERS = {
    "desk": Tier(n=1000, m=100, trials=50),
    "full": Tier(n=10000, m=1000, trials=1000),
}


@dataclass(frozen=True)
class ResultRow:
    lam: float
    variant: str
    metric: str
    value: float
    dispersion: float | None
    source: str

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"non-finite {self.metric} for {self.variant} at lambda={self.lam}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")


@dataclass
class ExperimentSpec:
    """Everything needed to reproduce one run of the harness."""

    mode: str
    cfg: SystemConfig | None = None
    integration: fluid.IntegrationSettings | None = None
    trials: int = 10
    seed: int = 0
    warmup: float = 5000.0
    horizon: float = 10000.0
    table_id: int | None = None
    tier: str = "desk"
    output_path: str | None = None
    # fluid mode: size i_max/c_max per lambda, keeping step and t_end from ``integration``
    auto_truncate: bool = False

    def validate(self) -> "ExperimentSpec":
        if self.mode not in MODES:
            raise ConfigError("bad-mode", f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if self.mode == "table":
            if self.table_id not in (1, 2, 3, 4, 5):
                raise ConfigError("bad-table", f"table id must be 1..5, got {self.table_id}")
            if self.tier not in TIERS:
                raise ConfigError("bad-tier", f"tier must be one of {', '.join(TIERS)}, got {self.tier!r}")
            return self
        if self.cfg is None:
            raise ConfigError("missing-config", f"{self.mode} mode needs a system configuration")
        cfg = validate_config(self.cfg)
        if self.mode == "simulate":
            if cfg.n is None:
                raise ConfigError("missing-size", "simulate mode needs --servers and --dispatchers")
            if self.trials < 1:
                raise ConfigError("bad-trials", f"trials must be >= 1, got {self.trials}")
            if not (0 <= self.warmup < self.horizon):
                raise ConfigError("bad-window", f"need 0 <= warmup < horizon, got {self.warmup}, {self.horizon}")
        elif self.mode == "fluid":
            if cfg.policy is AssignmentPolicy.SUPERMARKET:
                raise ConfigError("no-fluid-model", "no fluid model for the supermarket policy")
            fluid_model(cfg)
        elif self.mode == "equilibrium":
            if cfg.policy is not AssignmentPolicy.JIQ_RANDOM or cfg.z or cfg.discipline is IQueueDiscipline.LCFS:
                raise ConfigError("no-equilibrium-solver", "equilibrium solver covers plain JIQ-Random only")
        return dataclasses.replace(self, cfg=cfg)


# ---------------------------------------------------------------------------
# single-configuration runners


def fluid_model(cfg: SystemConfig) -> fluid.FluidModel:
    cfg = validate_config(cfg)
    if cfg.policy is AssignmentPolicy.SUPERMARKET:
        raise ConfigError("no-fluid-model", "no fluid model for the supermarket policy")
    d = cfg.d if cfg.policy is AssignmentPolicy.JIQ_SQD else None
    try:
        return fluid.FluidModel(cfg.lam, cfg.r, z=cfg.z, lcfs=cfg.discipline is IQueueDiscipline.LCFS, d=d)
    except ValueError as exc:
        raise ConfigError("no-fluid-model", str(exc)) from exc


def auto_truncation(lam: float, r: float, z: int = 0) -> tuple[int, int]:
    """(i_max, c_max) sized from the JIQ-Random equilibrium at (lam, r) and the threshold z."""
    sol = equilibrium.solve_equilibrium(lam, r, tol=1e-10, i_max=4096, c_max=1024)
    return fluid.suggest_truncation(lam, r, float(sol.candidate.q_bar[0]), z=z)


def default_settings(cfg: SystemConfig, **overrides) -> fluid.IntegrationSettings:
    """Integration settings with truncation chosen per (lam, r) unless overridden."""
    if "i_max" not in overrides or "c_max" not in overrides:
        i_max, c_max = auto_truncation(cfg.lam, cfg.r, cfg.z)
        overrides.setdefault("i_max", i_max)
        overrides.setdefault("c_max", c_max)
    return fluid.IntegrationSettings(**overrides)


def run_fluid(cfg: SystemConfig, settings: fluid.IntegrationSettings | None = None,
              record: bool = True) -> fluid.IntegrationResult:
    cfg = validate_config(cfg)
    model = fluid_model(cfg)
    settings = settings or default_settings(cfg)
    state = model.initial_state(settings.i_max, settings.c_max)
    return fluid.euler_integrate(model, state, settings, record=record)


def fluid_rows(cfg: SystemConfig, settings: fluid.IntegrationSettings | None = None,
               moments: bool = False) -> list[ResultRow]:
    cfg = validate_config(cfg)
    return _ode_rows(cfg, run_fluid(cfg, settings, record=False).state, moments)


def _ode_rows(cfg: SystemConfig, state, moments: bool) -> list[ResultRow]:
    rows = [ResultRow(cfg.lam, cfg.variant, "mean_time", fluid.mean_time_in_system(state, cfg.lam), None, "ode")]
    if moments:
        _, var = fluid.arrival_outcome_moments(state, cfg.lam, cfg.r)
        rows.append(ResultRow(cfg.lam, cfg.variant, "var_time", var, None, "ode"))
    return rows


def sim_rows(cfg: SystemConfig, trials: int, seed=0, horizon: float = 10000.0,
             warmup: float = 5000.0, record_path=None) -> list[ResultRow]:
    cfg = validate_config(cfg)
    s = des.simulate(cfg, seed=seed, trials=trials, horizon=horizon, warmup=warmup, record_path=record_path)
    se = (lambda v: None if math.isnan(v) else v)
    return [
        ResultRow(cfg.lam, cfg.variant, "mean_time", s.mean_time, se(s.mean_time_se), "sim"),
        ResultRow(cfg.lam, cfg.variant, "var_time", s.var_time, se(s.var_time_se), "sim"),
        ResultRow(cfg.lam, cfg.variant, "max_load_at_end", float(s.max_load), None, "sim"),
        ResultRow(cfg.lam, cfg.variant, "fraction_random", s.fraction_random, None, "sim"),
    ]


def equilibrium_rows(cfg: SystemConfig, i_max: int | None = None, c_max: int | None = None) -> list[ResultRow]:
    cfg = validate_config(cfg)
    if i_max is None or c_max is None:
        ai, ac = auto_truncation(cfg.lam, cfg.r)
        i_max = i_max or ai
        c_max = c_max or ac
    sol = equilibrium.solve_equilibrium(cfg.lam, cfg.r, i_max=i_max, c_max=c_max)
    _, t = equilibrium.equilibrium_metrics(sol, cfg.lam)
    return [
        ResultRow(cfg.lam, cfg.variant, "mean_time", t, None, "equilibrium"),
        ResultRow(cfg.lam, cfg.variant, "s1_nil", sol.x, None, "equilibrium"),
    ]


def formula_rows(cfg: SystemConfig) -> list[ResultRow]:
    cfg = validate_config(cfg)
    return [ResultRow(cfg.lam, "formula", "mean_time", lu_formula(cfg.lam, cfg.r), None, "formula")]


# ---------------------------------------------------------------------------
# tables


@dataclass(frozen=True)
class Column:
    source: str
    policy: AssignmentPolicy = AssignmentPolicy.JIQ_RANDOM
    discipline: IQueueDiscipline | None = None
    z: int = 0
    d: int = 1
    moments: bool = False

    def config(self, lam: float, r: float, n: int | None = None, m: int | None = None) -> SystemConfig:
        return validate_config(SystemConfig(lam=lam, r=r, n=n, m=m, policy=self.policy,
                                            discipline=self.discipline, z=self.z, d=self.d))


_RANDOM = dict()
_Z1 = dict(z=1)
_LCFS = dict(discipline=IQueueDiscipline.LCFS)
_SQ2 = dict(policy=AssignmentPolicy.JIQ_SQD, d=2)
_MARKET2 = dict(policy=AssignmentPolicy.SUPERMARKET, d=2)

TABLE_COLUMNS = {
    1: (Column("sim", **_RANDOM), Column("ode", **_RANDOM), Column("formula")),
    2: (Column("sim", **_Z1), Column("ode", **_Z1), Column("sim", **_RANDOM)),
    3: (Column("sim", **_LCFS), Column("ode", **_LCFS), Column("sim", discipline=IQueueDiscipline.FCFS)),
    4: (Column("sim", **_SQ2), Column("ode", **_SQ2), Column("sim", **_RANDOM)),
    5: (Column("sim", **_MARKET2), Column("sim", **_Z1), Column("sim", **_RANDOM),
        Column("ode", moments=True, **_Z1), Column("ode", moments=True, **_RANDOM)),
}


def run_table(table_id: int, tier: str = "desk", lambdas: Iterable[float] | None = None,
              trials: int | None = None, seed: int = 0, r: float = 10.0,
              sources: Iterable[str] | None = None, horizon: float = 10000.0, warmup: float = 5000.0,
              progress: Callable[[str], None] | None = None) -> list[ResultRow]:
    """Rows for one of the five result tables.

    ``sources`` restricts which columns run (e.g. ``{"ode"}``); ``trials``
    overrides the tier's trial count. Each simulated cell gets its own seed
    derived from (seed, table, column, lambda index).
    """
    if table_id not in TABLE_COLUMNS:
        raise ConfigError("bad-table", f"table id must be 1..5, got {table_id}")
    if tier not in TIERS:
        raise ConfigError("bad-tier", f"tier must be one of {', '.join(TIERS)}, got {tier!r}")
    spec = TIERS[tier]
    trials = spec.trials if trials is None else trials
    lambdas = TABLE_LAMBDAS if lambdas is None else tuple(lambdas)
    wanted = set(SOURCES if sources is None else sources)
    rows: list[ResultRow] = []
    for li, lam in enumerate(lambdas):
        settings = None
        for ci, col in enumerate(TABLE_COLUMNS[table_id]):
            if col.source not in wanted:
                continue
            if progress:
                progress(f"table {table_id} lambda={lam} {col.source} {col.config(lam, r).variant}")
            if col.source == "sim":
                cfg = col.config(lam, r, spec.n, spec.m)
                rows += sim_rows(cfg, trials, seed=[seed, table_id, ci, li], horizon=horizon, warmup=warmup)
            elif col.source == "ode":
                cfg = col.config(lam, r)
                settings = settings or default_settings(cfg)
                rows += fluid_rows(cfg, settings, moments=col.moments)
            elif col.source == "formula":
                rows += formula_rows(col.config(lam, r))
    return rows


def run_sweep(spec: ExperimentSpec, lambda_grid: Iterable[float]) -> list[ResultRow]:
    """Repeat ``spec`` at each lambda of the grid with everything else held fixed."""
    grid = list(lambda_grid)
    if not grid:
        return []
    if spec.mode == "table":
        raise ConfigError("bad-mode", "sweep runs a single-configuration mode, not table")
    rows: list[ResultRow] = []
    for li, lam in enumerate(grid):
        point = dataclasses.replace(spec, cfg=dataclasses.replace(spec.cfg, lam=lam)).validate()
        rows += run_single(point, seed=[spec.seed, li])
    return rows


def resolved_settings(spec: ExperimentSpec) -> fluid.IntegrationSettings:
    """Integration settings a fluid-mode spec runs with."""
    base = spec.integration or fluid.IntegrationSettings()
    if spec.integration is None or spec.auto_truncate:
        return default_settings(spec.cfg, step=base.step, t_end=base.t_end, record_every=base.record_every)
    return base


def run_single(spec: ExperimentSpec, seed=None, record_path=None, trajectory_path=None) -> list[ResultRow]:
    """Rows for one validated non-table spec.

    ``record_path`` receives the job records of the first simulated trial and
    ``trajectory_path`` the observed fluid trajectory.
    """
    cfg = spec.cfg
    if spec.mode == "simulate":
        return sim_rows(cfg, spec.trials, seed=spec.seed if seed is None else seed,
                        horizon=spec.horizon, warmup=spec.warmup, record_path=record_path)
    if spec.mode == "fluid":
        settings = resolved_settings(spec)
        if trajectory_path is None:
            return fluid_rows(cfg, settings, moments=True)
        res = run_fluid(cfg, settings, record=True)
        res.trajectory.write_csv(trajectory_path)
        return _ode_rows(cfg, res.state, moments=True)
    if spec.mode == "equilibrium":
        return equilibrium_rows(cfg)
    if spec.mode == "formula":
        return formula_rows(cfg)
    raise ConfigError("bad-mode", f"unknown mode {spec.mode!r}")


# ---------------------------------------------------------------------------
# output


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6g}"


def sorted_rows(rows: Iterable[ResultRow]) -> list[ResultRow]:
    """Deterministic order: lambda ascending, then source; ties keep their order."""
    return sorted(rows, key=lambda row: (row.lam, row.source))


def write_rows(rows: Iterable[ResultRow], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for row in sorted_rows(rows):
        w.writerow([_fmt(row.lam), row.variant, row.metric, _fmt(row.value), _fmt(row.dispersion), row.source])


def emit_csv(rows: Iterable[ResultRow], path) -> None:
    rows = list(rows)
    try:
        with open(path, "w", newline="") as fh:
            write_rows(rows, fh)
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc.strerror or exc}") from exc
