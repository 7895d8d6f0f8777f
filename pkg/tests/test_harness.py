import io
import math

import pytest

from jiq import fluid, harness
from jiq.harness import (ExperimentSpec, ResultRow, TABLE_LAMBDAS, emit_csv, run_single, run_sweep, run_table,
                         write_rows)
from jiq.model import AssignmentPolicy, ConfigError, SystemConfig
from test_model import FORMULA_COLUMN


def csv_text(rows):
    buf = io.StringIO()
    write_rows(rows, buf)
    return buf.getvalue()


def test_row_rejects_non_finite_value():
    with pytest.raises(ValueError):
        ResultRow(0.5, "jiq-random", "mean_time", math.nan, None, "sim")
    with pytest.raises(ValueError):
        ResultRow(0.5, "jiq-random", "mean_time", math.inf, None, "ode")


def test_row_rejects_unknown_source():
    with pytest.raises(ValueError):
        ResultRow(0.5, "jiq-random", "mean_time", 1.0, None, "guess")


@pytest.mark.parametrize("spec, code", [
    (ExperimentSpec(mode="plot"), "bad-mode"),
    (ExperimentSpec(mode="table", table_id=6), "bad-table"),
    (ExperimentSpec(mode="table", table_id=1, tier="huge"), "bad-tier"),
    (ExperimentSpec(mode="fluid"), "missing-config"),
    (ExperimentSpec(mode="simulate", cfg=SystemConfig(lam=0.5, r=10.0)), "missing-size"),
    (ExperimentSpec(mode="simulate", cfg=SystemConfig(lam=0.5, n=10, m=1), trials=0), "bad-trials"),
    (ExperimentSpec(mode="simulate", cfg=SystemConfig(lam=0.5, n=10, m=1), warmup=10.0, horizon=5.0), "bad-window"),
    (ExperimentSpec(mode="fluid", cfg=SystemConfig(lam=0.5, r=10.0, policy=AssignmentPolicy.SUPERMARKET, d=2)),
     "no-fluid-model"),
    (ExperimentSpec(mode="equilibrium", cfg=SystemConfig(lam=0.5, r=10.0, z=1)), "no-equilibrium-solver"),
    (ExperimentSpec(mode="formula", cfg=SystemConfig(lam=1.5, r=10.0)), "unstable-rate"),
])
def test_spec_validation(spec, code):
    with pytest.raises(ConfigError) as info:
        spec.validate()
    assert info.value.code == code


def test_one_row_file(tmp_path):
    path = tmp_path / "out.csv"
    emit_csv([ResultRow(0.9, "jiq-random", "mean_time", 1.8365916, None, "ode")], path)
    assert path.read_text().splitlines() == [
        "lambda,variant,metric,value,dispersion,source",
        "0.9,jiq-random,mean_time,1.83659,,ode",
    ]


def test_rows_sorted_on_emission():
    rows = [
        ResultRow(0.9, "jiq-random", "mean_time", 1.9, 0.01, "sim"),
        ResultRow(0.5, "formula", "mean_time", 1.1, None, "formula"),
        ResultRow(0.9, "jiq-random", "mean_time", 1.8, None, "ode"),
        ResultRow(0.5, "jiq-random", "mean_time", 1.2, None, "ode"),
    ]
    lines = csv_text(rows).splitlines()[1:]
    assert [line.split(",")[0] + "/" + line.split(",")[-1] for line in lines] == [
        "0.5/formula", "0.5/ode", "0.9/ode", "0.9/sim"]
    assert lines[-1] == "0.9,jiq-random,mean_time,1.9,0.01,sim"


def test_unwritable_path_named(tmp_path):
    bad = tmp_path / "no" / "such" / "dir.csv"
    with pytest.raises(OSError, match=str(bad)):
        emit_csv([], bad)


def test_formula_sweep_reproduces_column():
    spec = ExperimentSpec(mode="formula", cfg=SystemConfig(lam=0.5, r=10.0)).validate()
    rows = run_sweep(spec, TABLE_LAMBDAS)
    assert [f"{row.value:.6g}" for row in rows] == [f"{v:.6g}" for _, v in FORMULA_COLUMN]
    assert [row.lam for row in rows] == list(TABLE_LAMBDAS)


def test_empty_sweep():
    spec = ExperimentSpec(mode="formula", cfg=SystemConfig(lam=0.5, r=10.0)).validate()
    assert run_sweep(spec, []) == []
    assert csv_text([]) == "lambda,variant,metric,value,dispersion,source\n"


def test_sweep_rejects_table_mode():
    with pytest.raises(ConfigError):
        run_sweep(ExperimentSpec(mode="table", table_id=1), [0.5])


def test_simulated_sweep_is_byte_identical(tmp_path):
    spec = ExperimentSpec(mode="simulate", cfg=SystemConfig(lam=0.5, n=50, m=5), trials=2, seed=11,
                          horizon=200.0, warmup=100.0).validate()
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    emit_csv(run_sweep(spec, [0.5, 0.9]), a)
    emit_csv(run_sweep(spec, [0.5, 0.9]), b)
    assert a.read_bytes() == b.read_bytes()
    other = tmp_path / "c.csv"
    emit_csv(run_sweep(spec.__class__(**{**spec.__dict__, "seed": 12}), [0.5, 0.9]), other)
    assert other.read_bytes() != a.read_bytes()


def test_simulation_rows():
    spec = ExperimentSpec(mode="simulate", cfg=SystemConfig(lam=0.5, n=50, m=5), trials=3,
                          horizon=200.0, warmup=100.0).validate()
    rows = {row.metric: row for row in run_single(spec)}
    assert set(rows) == {"mean_time", "var_time", "max_load_at_end", "fraction_random"}
    assert rows["mean_time"].dispersion > 0 and rows["mean_time"].source == "sim"
    assert rows["max_load_at_end"].dispersion is None


def test_single_trial_has_blank_dispersion():
    spec = ExperimentSpec(mode="simulate", cfg=SystemConfig(lam=0.5, n=50, m=5), trials=1,
                          horizon=200.0, warmup=100.0).validate()
    assert all(row.dispersion is None for row in run_single(spec))


def test_fluid_rows_are_reproducible():
    cfg = SystemConfig(lam=0.9, r=10.0, z=1)
    settings = fluid.IntegrationSettings(t_end=20.0, i_max=64, c_max=32)
    a = harness.fluid_rows(cfg, settings, moments=True)
    b = harness.fluid_rows(cfg, settings, moments=True)
    assert a == b
    assert [row.metric for row in a] == ["mean_time", "var_time"]


def test_fluid_spec_with_auto_truncation(tmp_path):
    spec = ExperimentSpec(mode="fluid", cfg=SystemConfig(lam=0.9, r=10.0),
                          integration=fluid.IntegrationSettings(t_end=5.0), auto_truncate=True).validate()
    settings = harness.resolved_settings(spec)
    assert (settings.i_max, settings.c_max) == harness.auto_truncation(0.9, 10.0)
    assert settings.t_end == 5.0
    path = tmp_path / "traj.csv"
    rows = run_single(spec, trajectory_path=path)
    assert rows[0].metric == "mean_time"
    assert len(path.read_text().splitlines()) == 1 + 6


def test_equilibrium_rows():
    spec = ExperimentSpec(mode="equilibrium", cfg=SystemConfig(lam=0.9, r=10.0)).validate()
    rows = {row.metric: row.value for row in run_single(spec)}
    assert rows["mean_time"] == pytest.approx(1.83659, abs=1e-3)
    assert 0.0 < rows["s1_nil"] < 0.9


def test_unknown_table():
    with pytest.raises(ConfigError):
        run_table(9)
    with pytest.raises(ConfigError):
        run_table(1, tier="huge")


def test_formula_table():
    rows = run_table(1, sources=["formula"])
    assert [f"{row.value:.6g}" for row in rows] == [f"{v:.6g}" for _, v in FORMULA_COLUMN]


def test_table_columns_and_cell_seeds():
    seen = []
    rows = run_table(5, lambdas=[0.9], trials=1, sources=["sim"], horizon=60.0, warmup=30.0, seed=3,
                     progress=seen.append)
    variants = [row.variant for row in rows if row.metric == "mean_time"]
    assert variants == ["sq2", "jiq-random-z1", "jiq-random"]
    assert len(seen) == 3
    again = run_table(5, lambdas=[0.9], trials=1, sources=["sim"], horizon=60.0, warmup=30.0, seed=3)
    assert rows == again


def test_table_columns_match_tables():
    variants = {tid: [c.config(0.5, 10.0).variant for c in cols] for tid, cols in harness.TABLE_COLUMNS.items()}
    assert variants[1] == ["jiq-random", "jiq-random", "jiq-random"]
    assert variants[2] == ["jiq-random-z1", "jiq-random-z1", "jiq-random"]
    assert variants[3] == ["jiq-random-lcfs", "jiq-random-lcfs", "jiq-random"]
    assert variants[4] == ["jiq-sq2", "jiq-sq2", "jiq-random"]
    assert [c.source for c in harness.TABLE_COLUMNS[1]] == ["sim", "ode", "formula"]
