"""Fixed point of the JIQ-Random fluid model.

Every equilibrium value follows from a trial value x of s_bar[1, nil] (the
fraction of unenqueued servers with one job). ``build_candidate`` runs the
stationarity recurrences for a given x and ``solve_equilibrium`` bisects on x
until the candidate's total server mass is one.

The recurrences are evaluated in extended precision. The column s_bar[i, 1]
obeys a second-order recurrence whose growing root is 5 to 100 times larger
than one, so in double precision rounding noise swamps the true (decaying)
solution within a dozen terms. Even at high precision the bisection only
pins x down to the requested tolerance, so the growing mode eventually
surfaces; once the column stops decreasing or turns nonpositive the rest of
it is set to zero (``guard_index`` records where).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import mpmath
import numpy as np

from .fluid import FluidState

# Values whose magnitude falls below this are stored as exact zeros.
UNDERFLOW = 1e-300
OVERFLOW = 1e300
# Estimated mass beyond the truncation above which solve_equilibrium warns.
TAIL_WARN = 1e-6


class TruncationWarning(RuntimeWarning):
    pass


@dataclass
class EquilibriumCandidate:
    """Equilibrium arrays implied by one trial value ``x`` of s_bar[1, nil].

    Arrays share the FluidState layout: ``s_bar[i, j]`` for job count i and
    I-queue position j >= 1 (column 0 is zero padding), ``s_nil_bar[i]`` for
    i >= 1 (entry 0 unused).
    """

    x: float
    lam: float
    r: float
    rho: float
    q_bar: np.ndarray
    s_bar: np.ndarray
    s_nil_bar: np.ndarray
    total_mass: float
    guard_index: int | None = None
    underflow_count: int = 0

    @property
    def i_max(self) -> int:
        return self.q_bar.shape[0] - 1

    @property
    def c_max(self) -> int:
        return self.s_nil_bar.shape[0] - 1

    @property
    def tail_mass(self) -> float:
        """Rough estimate of server mass cut off by the truncation.

        Rows are geometric in position with ratio rho and s_nil decays at
        ratio lam * q0, so the last represented entries give the tail sums.
        """
        beyond_i = self.rho ** self.i_max / (1.0 - self.rho)
        decay = self.lam * (1.0 - self.rho)
        beyond_c = abs(self.s_nil_bar[-1]) * decay / (1.0 - decay)
        return beyond_i + beyond_c

    def to_state(self) -> FluidState:
        """The candidate as a fluid state (time 0) for use with the fluid module.

        Recurrence noise can leave entries of order -1e-15; those are clipped
        to zero so the state satisfies the nonnegativity invariant.
        """
        return FluidState(q=self.q_bar.copy(), s=np.maximum(self.s_bar, 0.0),
                          s_nil=np.maximum(self.s_nil_bar, 0.0), time=0.0)


@dataclass
class EquilibriumSolution:
    candidate: EquilibriumCandidate
    residual: float
    iterations: int

    @property
    def x(self) -> float:
        return self.candidate.x

    def to_state(self) -> FluidState:
        return self.candidate.to_state()


class BracketError(ArithmeticError):
    """total_mass - 1 does not change sign exactly once on the search interval."""


class ConvergenceError(ArithmeticError):
    pass


def _check_domain(x, lam, r):
    if not (0.0 < lam < 1.0):
        raise ValueError(f"need 0 < lambda < 1, got {lam}")
    if not (r > 0):
        raise ValueError(f"need r > 0, got {r}")
    if not (0 < x < lam):
        raise ValueError(f"trial value x must satisfy 0 < x < lambda = {lam}, got {x}")


def _recurrences(ctx, x, lam, r, c_max, stabilize):
    """Column s[i, 1] (i = 0..c_max) and s_nil[i] (i = 0..c_max) at precision of ctx."""
    lam = ctx.mpf(lam)
    r = ctx.mpf(r)
    x = ctx.mpf(x)
    rho = x / lam
    q0 = 1 - rho
    a = lam * q0
    b = lam * r

    col = [ctx.zero] * (c_max + 1)
    col[0] = (lam - x) * (1 - lam) / lam
    guard = None
    if c_max >= 1:
        # stationarity of ds[0, 1]; q_bar[0] = q0
        col[1] = a * col[0] - x * q0 - b * (rho * col[0] - col[0])
        if stabilize and (col[1] <= 0 or col[1] >= col[0]):
            col[1] = ctx.zero
            guard = 1
    grow = 1 + a + b * (1 - rho)
    for i in range(1, c_max):
        if guard is not None:
            break
        nxt = grow * col[i] - a * col[i - 1]
        if stabilize and (nxt <= 0 or nxt >= col[i]):
            guard = i + 1
            break
        col[i + 1] = nxt

    sn = [ctx.zero] * (c_max + 1)
    if c_max >= 1:
        sn[1] = x
    if c_max >= 2:
        sn[2] = x * (1 + r * (1 - lam) + lam - x) - r * lam * (1 - lam)
    for i in range(2, c_max):
        sn[i + 1] = sn[i] - a * (sn[i - 1] - sn[i]) - b * col[i - 1]
    return rho, col, sn, guard


def _mass(ctx, rho, col, sn, i_max):
    # sum_j rho^(j-1) for j = 1..i_max
    pos = (1 - rho ** i_max) / (1 - rho)
    return ctx.fsum(col) * pos + ctx.fsum(sn[1:])


def _to_float(values, cell, underflow):
    """Floats of ``values``; ``cell`` is a format string naming entry {k}."""
    out = np.zeros(len(values))
    for k, v in enumerate(values):
        f = float(v)
        if not math.isfinite(f) or abs(f) > OVERFLOW:
            raise OverflowError(f"recurrence overflowed at {cell.format(k=k)}: {mpmath.nstr(v, 6)}")
        if f != 0.0 and abs(f) < UNDERFLOW:
            underflow[0] += 1
            f = 0.0
        out[k] = f
    return out


def build_candidate(x, lam: float, r: float, i_max: int = 128, c_max: int = 128, *,
                    stabilize: bool = True, precision: int = 60) -> EquilibriumCandidate:
    """Equilibrium arrays for the trial value ``x`` of s_bar[1, nil].

    ``x`` may be a float or an ``mpmath.mpf``. ``precision`` is in decimal
    digits. With ``stabilize=False`` the column recurrence runs unguarded.
    """
    _check_domain(x, lam, r)
    if i_max < 1 or c_max < 1:
        raise ValueError("truncations must be >= 1")
    ctx = mpmath.MPContext()
    ctx.dps = precision
    rho, col, sn, guard = _recurrences(ctx, x, lam, r, c_max, stabilize)
    mass = _mass(ctx, rho, col, sn, i_max)

    underflow = [0]
    rho_f = float(rho)
    q0 = 1.0 - rho_f
    q_bar = q0 * rho_f ** np.arange(i_max + 1)
    col_f = _to_float(col, "(i, j) = ({k}, 1)", underflow)
    sn_f = _to_float(sn, "(i, j) = ({k}, nil)", underflow)
    sn_f[0] = 0.0
    s_bar = np.zeros((c_max + 1, i_max + 1))
    pos = rho_f ** np.arange(i_max)
    for i in range(c_max + 1):
        if col_f[i] == 0.0:
            continue
        row = col_f[i] * pos
        small = (row != 0.0) & (np.abs(row) < UNDERFLOW)
        underflow[0] += int(small.sum())
        row[small] = 0.0
        s_bar[i, 1:] = row
    q_small = (q_bar != 0.0) & (q_bar < UNDERFLOW)
    underflow[0] += int(q_small.sum())
    q_bar[q_small] = 0.0

    return EquilibriumCandidate(
        x=float(x), lam=lam, r=r, rho=rho_f, q_bar=q_bar, s_bar=s_bar, s_nil_bar=sn_f,
        total_mass=float(mass), guard_index=guard, underflow_count=underflow[0],
    )


def solve_equilibrium(lam: float, r: float, tol: float = 1e-12, i_max: int = 128, c_max: int = 128,
                      max_iter: int = 200, *, grid: int = 64, eps: float = 1e-9,
                      precision: int = 60) -> EquilibriumSolution:
    """Find x = s_bar[1, nil] with |total_mass - 1| <= tol by bisection.

    A coarse scan of ``grid`` points on (eps, lam - eps) runs first. No sign
    change, or more than one, raises BracketError rather than guessing.
    """
    if not (0.0 < lam < 1.0):
        raise ValueError(f"need 0 < lambda < 1, got {lam}")
    if not (tol > 0):
        raise ValueError(f"tolerance must be positive, got {tol}")
    if not (0 < eps < lam / 2):
        raise ValueError(f"eps must lie in (0, lambda/2), got {eps}")
    _check_domain(lam / 2, lam, r)
    ctx = mpmath.MPContext()
    ctx.dps = precision

    def excess(x):
        rho, col, sn, _ = _recurrences(ctx, x, lam, r, c_max, True)
        return _mass(ctx, rho, col, sn, i_max) - 1

    lo_end = ctx.mpf(eps)
    hi_end = ctx.mpf(lam) - eps
    xs = [lo_end + (hi_end - lo_end) * k / (grid - 1) for k in range(grid)]
    fs = [excess(x) for x in xs]
    changes = [k for k in range(grid - 1) if (fs[k] > 0) != (fs[k + 1] > 0)]
    if not changes:
        raise BracketError(
            f"total mass - 1 keeps one sign on ({eps}, {lam} - {eps}) at lambda={lam}, r={r}: "
            f"{float(fs[0]):.3g} .. {float(fs[-1]):.3g}")
    if len(changes) > 1:
        where = ", ".join(f"({float(xs[k]):.6g}, {float(xs[k + 1]):.6g})" for k in changes)
        raise BracketError(f"total mass crosses 1 more than once at lambda={lam}, r={r}: {where}")

    k = changes[0]
    lo, hi, f_lo = xs[k], xs[k + 1], fs[k]
    for it in range(1, max_iter + 1):
        mid = (lo + hi) / 2
        f = excess(mid)
        if abs(f) <= tol:
            cand = build_candidate(mid, lam, r, i_max, c_max, precision=precision)
            if cand.tail_mass > TAIL_WARN:
                warnings.warn(
                    f"equilibrium at lambda={lam}, r={r} leaves about {cand.tail_mass:.2g} mass beyond "
                    f"i_max={i_max}, c_max={c_max}; enlarge the truncation", TruncationWarning, stacklevel=2)
            return EquilibriumSolution(cand, abs(float(f)), it)
        if (f > 0) == (f_lo > 0):
            lo, f_lo = mid, f
        else:
            hi = mid
    raise ConvergenceError(
        f"bisection did not reach |mass - 1| <= {tol} in {max_iter} steps at lambda={lam}, r={r} "
        f"(last x={float(mid):.17g}, excess={float(f):.3g})")


def equilibrium_metrics(sol: EquilibriumSolution | EquilibriumCandidate, lam: float) -> tuple[float, float]:
    """(mean jobs per server, mean time in system) of an equilibrium."""
    cand = sol.candidate if isinstance(sol, EquilibriumSolution) else sol
    if not (lam > 0):
        raise ValueError(f"need lambda > 0, got {lam}")
    counts = np.arange(cand.c_max + 1, dtype=float)
    load = math.fsum(counts * cand.s_bar.sum(axis=1)) + math.fsum(counts[1:] * cand.s_nil_bar[1:])
    return load, load / lam
