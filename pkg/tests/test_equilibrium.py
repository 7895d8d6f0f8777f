import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jiq import equilibrium
from jiq.equilibrium import (BracketError, ConvergenceError, EquilibriumCandidate, TruncationWarning,
                             build_candidate, equilibrium_metrics, solve_equilibrium)


def oracle_mass(x, lam, r, i_max, c_max, dps=60):
    """Total server mass from the raw two-dimensional stationarity recurrences.

    Unlike the production code this keeps every position j separately
    instead of using the geometric shape of each row. Row i is computed on
    positions 1..i_max + c_max - i because the step to row i+1 reads
    position j+1 of row i.
    """
    mp = mpmath.MPContext()
    mp.dps = dps
    lam, r, x = mp.mpf(lam), mp.mpf(r), mp.mpf(x)
    rho = x / lam
    q0 = 1 - rho
    width = i_max + c_max + 1
    q = [q0 * rho ** j for j in range(width + 1)]
    s = [[mp.zero] * (width + 1) for _ in range(c_max + 1)]
    s[0][1] = (lam - x) * (1 - lam) / lam
    for j in range(2, width + 1):
        s[0][j] = rho * s[0][j - 1]
    if c_max >= 1:
        # stationarity of the idle-server equation
        for j in range(1, width):
            s[1][j] = lam * q0 * s[0][j] + lam * r * (s[0][j] - s[0][j + 1]) - x * q[j - 1]
    for i in range(1, c_max):
        # stationarity of the busy-server equation, solved for row i + 1
        for j in range(1, width - i):
            s[i + 1][j] = (1 + lam * q0 + lam * r) * s[i][j] - lam * q0 * s[i - 1][j] - lam * r * s[i][j + 1]
    sn = [mp.zero] * (c_max + 1)
    sn[1] = x
    if c_max >= 2:
        sn[2] = x * (1 + r * (1 - lam) + lam - x) - r * lam * (1 - lam)
    for i in range(2, c_max):
        sn[i + 1] = sn[i] - lam * q0 * (sn[i - 1] - sn[i]) - lam * r * s[i - 1][1]
    mass = mp.fsum(s[i][j] for i in range(c_max + 1) for j in range(1, i_max + 1)) + mp.fsum(sn[1:])
    return mass, s, sn


@pytest.mark.parametrize("x", np.linspace(0.05, 0.85, 17))
def test_mass_matches_two_dimensional_oracle(x):
    mass, s, sn = oracle_mass(x, 0.9, 10.0, 16, 16)
    cand = build_candidate(x, 0.9, 10.0, i_max=16, c_max=16, stabilize=False)
    assert cand.total_mass == pytest.approx(float(mass), rel=1e-12, abs=1e-12)
    want = np.array([[float(s[i][j]) for j in range(17)] for i in range(17)])
    want[:, 0] = 0.0
    np.testing.assert_allclose(cand.s_bar, want, rtol=1e-12, atol=1e-300)
    np.testing.assert_allclose(cand.s_nil_bar[1:], [float(v) for v in sn[1:]], rtol=1e-12)


def test_oracle_cross_check_is_sensitive():
    # a different ratio r changes the mass, so agreement above is not vacuous
    a, _, _ = oracle_mass(0.45, 0.9, 10.0, 16, 16)
    b, _, _ = oracle_mass(0.45, 0.9, 9.0, 16, 16)
    assert abs(a - b) > 1e-3


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 0.99), st.floats(0.01, 0.99))
def test_candidate_structure(lam, frac):
    x = lam * frac
    cand = build_candidate(x, lam, 10.0, i_max=256, c_max=8)
    rho = x / lam
    assert cand.rho == pytest.approx(rho)
    # idle servers make up 1 - lam once the position tail is negligible
    if rho ** 256 < 1e-14:
        assert cand.s_bar[0].sum() == pytest.approx(1.0 - lam, abs=1e-12)
        assert cand.q_bar.sum() == pytest.approx(1.0, abs=1e-14)
    # entries below the underflow threshold are stored as zeros
    floor = equilibrium.UNDERFLOW
    np.testing.assert_allclose(cand.q_bar[1:], rho * cand.q_bar[:-1], rtol=1e-12, atol=floor)
    rows = cand.s_bar[:, 1:]
    np.testing.assert_allclose(rows[:, 1:], rho * rows[:, :-1], rtol=1e-12, atol=floor)
    assert cand.q_bar[0] == pytest.approx(1.0 - rho)


@pytest.mark.parametrize("x", [0.0, -0.1, 0.9, 1.2])
def test_trial_value_domain(x):
    with pytest.raises(ValueError):
        build_candidate(x, 0.9, 10.0)


def test_unstable_rate_rejected():
    with pytest.raises(ValueError):
        solve_equilibrium(1.0, 10.0)
    with pytest.raises(ValueError):
        solve_equilibrium(0.5, 10.0, tol=0.0)


def test_unguarded_column_reports_overflow_cell():
    with pytest.raises(OverflowError, match=r"\(i, j\) = \(\d+, 1\)"):
        build_candidate(0.45, 0.9, 10.0, i_max=16, c_max=1000, stabilize=False)


def test_guard_flushes_growing_mode():
    cand = build_candidate(0.45, 0.9, 10.0, c_max=128)
    assert cand.guard_index is not None
    col = cand.s_bar[:, 1]
    assert np.all(col[cand.guard_index:] == 0.0)
    assert np.all(np.diff(col[:cand.guard_index]) < 0.0)


@pytest.mark.parametrize("lam, printed", [(0.5, 1.12894), (0.8, 1.40790), (0.9, 1.83659), (0.95, 2.68035)])
def test_solved_mean_time_near_table(lam, printed):
    sol = solve_equilibrium(lam, 10.0, i_max=512, c_max=256)
    _, t = equilibrium_metrics(sol, lam)
    assert t == pytest.approx(printed, abs=1e-3)
    assert sol.residual <= 1e-12
    assert sol.candidate.total_mass == pytest.approx(1.0, abs=1e-12)


def test_solution_relations():
    sol = solve_equilibrium(0.9, 10.0, i_max=256, c_max=128)
    assert 0.0 < sol.x < 0.9
    assert sol.x == pytest.approx(0.9 * (1.0 - sol.candidate.q_bar[0]), rel=1e-14)
    state = sol.to_state()
    assert state.s.min() >= 0.0 and state.s_nil.min() >= 0.0
    assert sol.iterations >= 1


def test_all_idle_candidate_has_no_load():
    s_bar = np.zeros((3, 3))
    s_bar[0, 1:] = [0.6, 0.4]
    cand = EquilibriumCandidate(x=0.1, lam=0.5, r=10.0, rho=0.2, q_bar=np.array([0.8, 0.16, 0.04]),
                                s_bar=s_bar, s_nil_bar=np.zeros(3), total_mass=1.0)
    assert equilibrium_metrics(cand, 0.5) == (0.0, 0.0)


def test_no_bracket_reported():
    with pytest.raises(BracketError, match="keeps one sign"):
        solve_equilibrium(0.9, 10.0, i_max=1, c_max=1)


def test_several_crossings_reported(monkeypatch):
    def wavy(ctx, rho, col, sn, i_max):
        return 1 + mpmath.sin(40 * rho)

    monkeypatch.setattr(equilibrium, "_mass", wavy)
    with pytest.raises(BracketError, match="more than once"):
        solve_equilibrium(0.9, 10.0)


def test_iteration_cap():
    with pytest.raises(ConvergenceError, match="5 steps"):
        solve_equilibrium(0.9, 10.0, tol=1e-40, max_iter=5)


def test_small_truncation_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        solve_equilibrium(0.5, 10.0, i_max=32, c_max=32)
    assert any(issubclass(w.category, TruncationWarning) for w in caught)


def test_adequate_truncation_is_silent():
    with warnings.catch_warnings():
        warnings.simplefilter("error", TruncationWarning)
        solve_equilibrium(0.9, 10.0, i_max=128, c_max=128)
