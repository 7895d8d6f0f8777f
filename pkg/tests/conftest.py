import functools

import pytest

from jiq import fluid, harness
from jiq.model import AssignmentPolicy, IQueueDiscipline, SystemConfig

VARIANTS = {
    "random": {},
    "z1": {"z": 1},
    "lcfs": {"discipline": IQueueDiscipline.LCFS},
    "sq2": {"policy": AssignmentPolicy.JIQ_SQD, "d": 2},
}

_criteria: dict[int, list[tuple[bool, str]]] = {}


@functools.lru_cache(maxsize=None)
def ode_run(variant: str, lam: float, step: float = 0.01, truncation: tuple[int, int] | None = None):
    """Full-length Euler run, shared by every test in the session.

    Truncation is sized automatically unless given as (i_max, c_max).
    """
    cfg = SystemConfig(lam=lam, r=10.0, **VARIANTS[variant])
    if truncation is None:
        settings = harness.default_settings(cfg, step=step)
    else:
        settings = fluid.IntegrationSettings(step=step, i_max=truncation[0], c_max=truncation[1])
    return harness.run_fluid(cfg, settings, record=True)


def ode_mean_time(variant: str, lam: float, **kw) -> float:
    return fluid.mean_time_in_system(ode_run(variant, lam, **kw).state, lam)


@pytest.fixture
def criterion():
    """Record a pass/fail line for an acceptance criterion; one criterion may get several lines."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _criteria.setdefault(number, []).append((bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        parts = _criteria[number]
        verdict = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        details = "; ".join(detail for _, detail in parts)
        terminalreporter.write_line(f"criterion {number}: {verdict}  {details}")
