"""Shared system configuration and the closed-form baseline of Lu et al."""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass


class ConfigError(ValueError):
    """Invalid system configuration. ``code`` names the violated invariant."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class AssignmentPolicy(str, enum.Enum):
    JIQ_RANDOM = "jiq-random"
    JIQ_SQD = "jiq-sqd"
    SUPERMARKET = "supermarket"

    @property
    def uses_iqueues(self) -> bool:
        return self is not AssignmentPolicy.SUPERMARKET


class IQueueDiscipline(str, enum.Enum):
    FCFS = "fcfs"
    LCFS = "lcfs"


@dataclass(frozen=True)
class SystemConfig:
    """Parameters of one JIQ (or supermarket) system.

    ``r`` is what the fluid and equilibrium code read; the simulator needs the
    finite counts ``n`` (servers) and ``m`` (dispatchers). ``discipline`` is
    ``None`` for the supermarket policy and defaults to FCFS for JIQ policies
    once validated.
    """

    lam: float
    r: float | None = None
    n: int | None = None
    m: int | None = None
    policy: AssignmentPolicy = AssignmentPolicy.JIQ_RANDOM
    discipline: IQueueDiscipline | None = None
    z: int = 0
    d: int = 1

    @property
    def variant(self) -> str:
        """Short label used in result tables, e.g. ``jiq-random-z1``."""
        if self.policy is AssignmentPolicy.SUPERMARKET:
            return f"sq{self.d}"
        name = "jiq-random" if self.policy is AssignmentPolicy.JIQ_RANDOM else f"jiq-sq{self.d}"
        if self.z:
            name += f"-z{self.z}"
        if self.discipline is IQueueDiscipline.LCFS:
            name += "-lcfs"
        return name


def validate_config(cfg: SystemConfig) -> SystemConfig:
    """Check every invariant of ``cfg`` and return a normalized copy.

    Normalization fills ``r`` from ``n / m`` when only the counts are given
    and sets the FCFS default discipline for JIQ policies.
    """
    if not (0.0 < cfg.lam < 1.0) or not math.isfinite(cfg.lam):
        raise ConfigError("unstable-rate", f"arrival rate must satisfy 0 < lambda < 1, got {cfg.lam}")
    if (cfg.n is None) != (cfg.m is None):
        raise ConfigError("partial-size", "server count n and dispatcher count m must be given together")
    r = cfg.r
    if cfg.n is not None:
        if cfg.n < 1 or cfg.m < 1:
            raise ConfigError("nonpositive-size", f"n and m must be >= 1, got n={cfg.n}, m={cfg.m}")
        if r is None:
            r = cfg.n / cfg.m
        elif not math.isclose(cfg.n, r * cfg.m, rel_tol=1e-12, abs_tol=0.0):
            raise ConfigError("ratio-mismatch", f"n={cfg.n} != r*m = {r}*{cfg.m}")
    if r is None or not (r > 0.0) or not math.isfinite(r):
        raise ConfigError("nonpositive-ratio", f"servers-per-dispatcher ratio r must be > 0, got {r}")
    if cfg.z < 0:
        raise ConfigError("negative-threshold", f"early-join threshold z must be >= 0, got {cfg.z}")
    if cfg.d < 1:
        raise ConfigError("bad-choice-count", f"probe count d must be >= 1, got {cfg.d}")

    discipline = cfg.discipline
    if cfg.policy is AssignmentPolicy.SUPERMARKET:
        if discipline is not None:
            raise ConfigError("supermarket-discipline", "supermarket policy has no I-queues; drop the discipline")
        if cfg.z > 0:
            raise ConfigError("supermarket-threshold", "supermarket policy has no I-queues; z must be 0")
    elif discipline is None:
        discipline = IQueueDiscipline.FCFS

    return dataclasses.replace(cfg, r=float(r), discipline=discipline)


def lu_formula(lam: float, r: float) -> float:
    """Mean time in system from the original JIQ analysis: 1 + lam/((1-lam)(1+r))."""
    if not (0.0 <= lam < 1.0):
        raise ValueError(f"lu_formula needs 0 <= lambda < 1, got {lam}")
    if r <= 0:
        raise ValueError(f"lu_formula needs r > 0, got {r}")
    return 1.0 + lam / ((1.0 - lam) * (1.0 + r))
