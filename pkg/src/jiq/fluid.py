"""Mean-field fluid limit of JIQ systems.

State layout (both classes):

* ``q[i]``       fraction of I-queues holding ``i`` servers, ``0 <= i <= i_max``
  (``TailState.q_hat[i]`` holds the fraction with at least ``i``).
* ``s[i, j]``    fraction of servers with ``i`` jobs sitting at position ``j``
  of some I-queue, ``1 <= j <= i_max``; column 0 is padding and stays zero.
* ``s_nil[i]``   fraction of servers with ``i`` jobs on no I-queue; entry 0 is
  never populated by any of the supported dynamics.

Positions count from the front (the server handed the next job).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Union

import numpy as np

from . import _fluid_kernels as kern


class IntegrationError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite value in fluid state at Euler step {step}")
        self.step = step


class InconsistentStateError(ValueError):
    pass


@dataclass
class FluidState:
    q: np.ndarray
    s: np.ndarray
    s_nil: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.s = np.asarray(self.s, dtype=float)
        self.s_nil = np.asarray(self.s_nil, dtype=float)
        _check_shapes(self.q, self.s, self.s_nil)

    @property
    def i_max(self) -> int:
        return self.q.shape[0] - 1

    @property
    def c_max(self) -> int:
        return self.s_nil.shape[0] - 1

    def copy(self) -> "FluidState":
        return FluidState(self.q.copy(), self.s.copy(), self.s_nil.copy(), self.time)


@dataclass
class TailState:
    q_hat: np.ndarray
    s: np.ndarray
    s_nil: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.q_hat = np.asarray(self.q_hat, dtype=float)
        self.s = np.asarray(self.s, dtype=float)
        self.s_nil = np.asarray(self.s_nil, dtype=float)
        _check_shapes(self.q_hat, self.s, self.s_nil)

    @property
    def i_max(self) -> int:
        return self.q_hat.shape[0] - 1

    @property
    def c_max(self) -> int:
        return self.s_nil.shape[0] - 1

    def copy(self) -> "TailState":
        return TailState(self.q_hat.copy(), self.s.copy(), self.s_nil.copy(), self.time)


State = Union[FluidState, TailState]


def _check_shapes(q, s, s_nil):
    if q.ndim != 1 or s_nil.ndim != 1 or s.ndim != 2:
        raise ValueError("q and s_nil must be 1-d and s 2-d")
    if s.shape != (s_nil.shape[0], q.shape[0]):
        raise ValueError(
            f"mismatched dimensions: s{s.shape} vs (len(s_nil), len(q)) = {(s_nil.shape[0], q.shape[0])}"
        )
    if q.shape[0] < 2 or s_nil.shape[0] < 2:
        raise ValueError("truncations must be >= 1")


@dataclass(frozen=True)
class IntegrationSettings:
    step: float = 0.01
    t_end: float = 10000.0
    i_max: int = 128
    c_max: int = 128
    record_every: float = 1.0

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError(f"step must be > 0, got {self.step}")
        if not self.t_end >= 0:
            raise ValueError(f"t_end must be >= 0, got {self.t_end}")
        if self.i_max < 1 or self.c_max < 1:
            raise ValueError("truncations must be >= 1")
        if not self.record_every > 0:
            raise ValueError("record_every must be > 0")

    @property
    def n_steps(self) -> int:
        # guard against 10000/0.01 landing a hair above an integer
        return math.ceil(self.t_end / self.step - 1e-9)


def init_state(i_max: int, c_max: int) -> FluidState:
    """All I-queues empty and every server holding one job."""
    if i_max < 1 or c_max < 1:
        raise ValueError("truncations must be >= 1")
    q = np.zeros(i_max + 1)
    q[0] = 1.0
    s_nil = np.zeros(c_max + 1)
    s_nil[1] = 1.0
    return FluidState(q, np.zeros((c_max + 1, i_max + 1)), s_nil)


def to_tail(state: FluidState) -> TailState:
    q_hat = np.cumsum(state.q[::-1])[::-1]
    return TailState(q_hat, state.s.copy(), state.s_nil.copy(), state.time)


def from_tail(state: TailState) -> FluidState:
    q = state.q_hat - np.append(state.q_hat[1:], 0.0)
    return FluidState(q, state.s.copy(), state.s_nil.copy(), state.time)


@dataclass(frozen=True)
class FluidModel:
    """One family of fluid equations with its parameters bound.

    ``z`` is the early-join threshold, ``lcfs`` switches the I-queue
    discipline and ``d`` (when given) selects JIQ-SQ(d), whose equations run
    on ``TailState``. Only one variation at a time has equations here, so
    combinations are rejected.
    """

    lam: float
    r: float
    z: int = 0
    lcfs: bool = False
    d: int | None = None

    def __post_init__(self):
        if self.z < 0:
            raise ValueError("z must be >= 0")
        if self.d is not None and self.d < 1:
            raise ValueError("d must be >= 1")
        if sum((self.z > 0, self.lcfs, self.d is not None)) > 1:
            raise ValueError("threshold, LCFS and SQ(d) families are only available separately")

    @property
    def tail(self) -> bool:
        return self.d is not None

    def _args(self):
        return (self.lam, self.r, self.z, self.lcfs, self.d or 1, self.tail)

    def _qv(self, state: State) -> np.ndarray:
        if self.tail:
            if not isinstance(state, TailState):
                raise TypeError("SQ(d) equations need a TailState")
            return state.q_hat
        if not isinstance(state, FluidState):
            raise TypeError("expected a FluidState")
        return state.q

    def rates(self, state: State) -> State:
        qv = self._qv(state)
        dq = np.zeros_like(qv)
        ds = np.zeros_like(state.s)
        dsn = np.zeros_like(state.s_nil)
        kern.rates(qv, state.s, state.s_nil, *self._args(), dq, ds, dsn)
        return type(state)(dq, ds, dsn, 0.0)

    __call__ = rates

    def initial_state(self, i_max: int, c_max: int) -> State:
        st = init_state(i_max, c_max)
        return to_tail(st) if self.tail else st


def deriv_jiq_random(state: FluidState, lam: float, r: float) -> FluidState:
    return FluidModel(lam, r).rates(state)


def deriv_early_threshold(state: FluidState, lam: float, r: float, z: int) -> FluidState:
    return FluidModel(lam, r, z=z).rates(state)


def deriv_lcfs(state: FluidState, lam: float, r: float) -> FluidState:
    """LCFS I-queues; ``s[i, j]`` then means j-th from the front, new joiners at 1."""
    return FluidModel(lam, r, lcfs=True).rates(state)


def deriv_jiq_sqd(state: TailState, lam: float, r: float, d: int) -> TailState:
    return FluidModel(lam, r, d=d).rates(state)


@dataclass
class Trajectory:
    """Samples taken every ``record_every`` time units.

    ``resid_link`` is the mismatch between enqueued servers counted from
    the I-queue side and from the server side.
    """

    t: np.ndarray
    q0: np.ndarray
    mean_load: np.ndarray
    mean_time: np.ndarray
    resid_q: np.ndarray
    resid_s: np.ndarray
    resid_link: np.ndarray

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Trajectory":
        return cls(*(arr[:, k].copy() for k in range(7)))

    def max_residual(self) -> float:
        if self.t.size == 0:
            return 0.0
        return float(max(self.resid_q.max(), self.resid_s.max(), self.resid_link.max()))

    def write_csv(self, path) -> None:
        path = Path(path)
        try:
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["t", "q0", "mean_load", "mean_time", "resid_q", "resid_s"])
                for row in zip(self.t, self.q0, self.mean_load, self.mean_time, self.resid_q, self.resid_s):
                    w.writerow([f"{v:.10g}" for v in row])
        except OSError as exc:
            raise OSError(f"cannot write trajectory to {path}: {exc}") from exc


@dataclass
class IntegrationResult:
    state: State
    trajectory: Trajectory | None
    clamped_mass: float
    steps: int


Deriv = Callable[[State], State]


def euler_integrate(deriv: Deriv, state: State, settings: IntegrationSettings,
                    record: bool = True, *, lam: float | None = None,
                    r: float | None = None) -> IntegrationResult:
    """Forward Euler from ``state`` for ceil(t_end/step) steps.

    Negative entries produced by a step are clamped to zero and the clamped
    mass is accumulated. ``FluidModel`` instances take a compiled path; any
    other callable returning a same-shaped derivative runs step by step in
    Python, which is only practical for short horizons. Such callables need
    ``lam`` and ``r`` passed explicitly when a trajectory is recorded.
    """
    if (state.i_max, state.c_max) != (settings.i_max, settings.c_max):
        raise ValueError(
            f"state truncation {(state.i_max, state.c_max)} does not match "
            f"settings {(settings.i_max, settings.c_max)}"
        )
    st = state.copy()
    tail = isinstance(st, TailState)
    h = settings.step
    n = settings.n_steps
    every = max(1, int(round(settings.record_every / h)))
    n_rec = n // every + 1 if record else 0
    rec = np.zeros((n_rec, 7))

    if isinstance(deriv, FluidModel):
        qv = deriv._qv(st)
        done, clamped, failed = kern.integrate(qv, st.s, st.s_nil, *deriv._args(), h, n, every, rec)
        if failed >= 0:
            raise IntegrationError(failed)
        lam, r = deriv.lam, deriv.r
    else:
        if record and (lam is None or r is None):
            raise ValueError("recording a trajectory for a generic derivative needs lam and r")
        clamped = 0.0
        qv = st.q_hat if tail else st.q
        row = 0
        if record:
            kern.observe(qv, st.s, st.s_nil, lam, r, tail, rec[0, 1:])
            row = 1
        for step in range(n):
            der = deriv(st)
            dqv = der.q_hat if tail else der.q
            c, ok = kern.advance(qv, st.s, st.s_nil, dqv, der.s, der.s_nil, h, tail)
            clamped += c
            if not ok:
                raise IntegrationError(step)
            if record and (step + 1) % every == 0 and row < n_rec:
                rec[row, 0] = (step + 1) * h
                kern.observe(qv, st.s, st.s_nil, lam, r, tail, rec[row, 1:])
                row += 1
    st.time = state.time + n * h
    traj = Trajectory.from_array(rec) if record else None
    if traj is not None:
        traj.t += state.time
    return IntegrationResult(st, traj, float(clamped), n)


def _plain(state) -> FluidState:
    if isinstance(state, TailState):
        return from_tail(state)
    if isinstance(state, FluidState):
        return state
    to_state = getattr(state, "to_state", None)
    if to_state is not None:
        return to_state()
    raise TypeError(f"not a fluid state: {type(state).__name__}")


def mean_jobs_per_server(state) -> float:
    st = _plain(state)
    i = np.arange(st.c_max + 1)
    return float(i @ st.s.sum(axis=1) + i @ st.s_nil)


def mean_time_in_system(state, lam: float) -> float:
    """Little's law: mean jobs per server over the per-server arrival rate."""
    if lam <= 0:
        raise ValueError(f"mean time needs lambda > 0, got {lam}")
    return mean_jobs_per_server(state) / lam


def conservation_residuals(state, r: float | None = None) -> tuple[float, float, float]:
    """(|sum q - 1|, |sum s - 1|, |sum i q_i - r sum s_ij|).

    The third term needs ``r``; without it only the first two are meaningful
    and the third is returned as 0.
    """
    st = _plain(state)
    res_q = abs(math.fsum(st.q) - 1.0)
    res_s = abs(math.fsum(st.s.ravel()) + math.fsum(st.s_nil) - 1.0)
    if r is None:
        return res_q, res_s, 0.0
    link = abs(float(np.arange(st.i_max + 1) @ st.q) - r * math.fsum(st.s.ravel()))
    return res_q, res_s, link


def arrival_outcome_moments(state, lam: float, r: float, tol: float = 1e-6) -> tuple[float, float]:
    """Mean and variance of the time in system of a job arriving now.

    The job goes to the front server of its dispatcher's I-queue, or to a
    uniformly random server when that I-queue is empty. With FCFS service at
    the server and unit-mean exponential services, a job that finds ``i``
    jobs ahead takes an Erlang(i + 1) time.
    """
    st = _plain(state)
    q0 = st.q[0]
    pmf = r * st.s[:, 1] + q0 * (st.s.sum(axis=1) + st.s_nil)
    total = pmf.sum()
    if abs(total - 1.0) > tol:
        raise InconsistentStateError(f"arrival pmf sums to {total!r}, not 1")
    k = np.arange(st.c_max + 1) + 1.0
    mean = float(k @ pmf)
    second = float((k * k) @ pmf)
    return mean, mean + (second - mean * mean)


def suggest_truncation(lam: float, r: float, q0: float, eps: float = 1e-17,
                       floor: tuple[int, int] = (0, 32), z: int = 0) -> tuple[int, int]:
    """Truncation (i_max, c_max) leaving tails below ``eps``.

    In equilibrium I-queue lengths are geometric with ratio ``1 - q0`` and the
    job count of unenqueued servers has tail ratio ``lam * q0``. The I-queue
    bound is also kept above a Poisson(r)-style margin because the start
    state sends every server to the I-queues at once. ``q0`` is shrunk by a
    fifth since early-join variants empty their I-queues less often, and
    each threshold unit ``z`` widens the margin because busy servers that join
    early overshoot the I-queues during the transient.
    """
    q0_low = min(max(0.8 * q0, 1e-6), 1.0 - 1e-12)
    need_i = math.log(eps) / math.log(1.0 - q0_low)
    burst = r + 12.0 * math.sqrt(r) + 16.0 * (1 + z)
    i_max = max(floor[0], _round8(max(need_i, burst)))
    tail_ratio = min(max(lam * q0, 1e-6), 1.0 - 1e-12)
    need_c = math.log(eps) / math.log(tail_ratio)
    c_max = max(floor[1], _round8(need_c * 1.1))
    return i_max, c_max


def _round8(x: float) -> int:
    return int(math.ceil(x / 8.0) * 8)
