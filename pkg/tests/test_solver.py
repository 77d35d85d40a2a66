import numpy as np
import pytest
from hypothesis import given, strategies as st

from impulse_qvi.grid import Field, Grid
from impulse_qvi.solver import (
    PenaltyFamily,
    Solution,
    SolverConfig,
    beta_eval,
    extract_regions,
    qvi_residual,
    solve_linear,
    solve_penalized,
)

from conftest import make_problem, shipped


# --- penalty family -----------------------------------------------------------


def test_beta_examples():
    assert beta_eval(PenaltyFamily(0.1), 0.0) == 0.0
    assert beta_eval(PenaltyFamily(0.1), 0.5) == pytest.approx(5.0)
    assert beta_eval(PenaltyFamily(1.0), -1e6) == -1.0
    # below unit epsilon the negative branch is squeezed to -eps so it vanishes in the limit
    assert beta_eval(PenaltyFamily(1e-3), -1e6) == pytest.approx(-1e-3)


@given(st.floats(1e-8, 10), st.floats(-50, 50), st.floats(-50, 50))
def test_beta_shape(eps, x, y):
    beta = PenaltyFamily(eps)
    lo, hi = min(x, y), max(x, y)
    assert beta(lo) >= -1.0
    assert beta(lo) <= beta(hi)
    # convexity along the chord
    mid = 0.5 * (lo + hi)
    assert beta(mid) <= 0.5 * (beta(lo) + beta(hi)) + 1e-9 * (1 + abs(beta(hi)))
    # strictly positive in exact arithmetic; far below 0 it underflows to 0.0
    assert 0 <= beta.derivative(lo) <= beta.derivative(hi) * (1 + 1e-12)
    assert beta.derivative(hi) <= 1.0 / eps * (1 + 1e-12)


@given(st.floats(1e-6, 10))
def test_beta_smooth_at_zero(eps):
    beta = PenaltyFamily(eps)
    assert beta.derivative(0.0) == pytest.approx(1 / eps)
    # the negative branch decays on the scale floor * eps
    width = beta.floor * eps
    assert beta.derivative(-1e-8 * width) == pytest.approx(1 / eps, rel=1e-6)
    assert beta.derivative(-10 * width) == pytest.approx(np.exp(-10) / eps, rel=1e-9)


def test_config_rejects_bad_schedule():
    grid = Grid.make([-1], [1], [11], 3, 1.0)
    with pytest.raises(ValueError, match="decreasing"):
        SolverConfig(grid, epsilon_schedule=(0.1, 0.2))
    with pytest.raises(ValueError, match="unknown"):
        SolverConfig.from_dict({"grid": grid.to_dict(), "typo": 1})
    cfg = SolverConfig(grid, epsilon_schedule=(0.1, 0.01), search=[[-1, 1]])
    assert SolverConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


# --- linear march -------------------------------------------------------------


def test_heat_polynomial_is_reproduced():
    grid = Grid.make([-2], [2], [81], 41, 1.0)
    spec = make_problem()
    u = solve_linear(spec, grid, Field.from_function(grid, lambda p: p[:, 0] ** 2))
    x = grid.points()[:, 0]
    exact = x[None, :] ** 2 + 2 * grid.times[:, None]
    assert np.max(np.abs(u - exact)) <= 1e-8


def test_pure_integration():
    grid = Grid.make([-1], [1], [11], 21, 2.0)
    spec = make_problem(diffusion="0", running_cost="1", terminal_cost="0")
    u = solve_linear(spec, grid, Field(grid, np.zeros(11)))
    np.testing.assert_allclose(u, np.broadcast_to(grid.times[:, None], u.shape), atol=1e-12)


def test_discounted_decay_is_backward_euler():
    grid = Grid.make([-1], [1], [11], 51, 1.0)
    spec = make_problem(diffusion="0", discount=1.0, terminal_cost="1")
    u = solve_linear(spec, grid, Field(grid, np.ones(11)))
    k = np.arange(51)
    np.testing.assert_allclose(u[:, 5], (1 + grid.dt) ** -k, rtol=1e-12)
    assert np.max(np.abs(u[:, 5] - np.exp(-grid.times))) <= grid.dt


# --- penalized QVI ------------------------------------------------------------


def test_heat_baseline(heat):
    spec, sol = heat
    x = sol.grid.points()[:, 0]
    exact = x[None, :] ** 2 + 2 * sol.grid.times[:, None]
    inner = np.abs(x) <= 1.8
    assert np.max(np.abs(sol.values[:, inner] - exact[:, inner])) <= 2e-2
    assert not sol.action.any()
    assert sol.diagnostics["converged"]
    res = qvi_residual(sol, spec)
    assert res["r2_max"] == 0.0
    assert res["r1_max"] <= 5e-2
    assert res["comp_max"] <= res["r1_max"]


def test_zero_costs_give_zero_value():
    spec = make_problem(terminal_cost="0", intervention_cost="1 + xi[0]^2")
    sol = solve_penalized(spec, SolverConfig(Grid.make([-1], [1], [21], 11, 1.0)))
    # the negative penalty branch contributes at most eps_final * T
    np.testing.assert_allclose(sol.values, 0.0, atol=1e-8 * (1 + 1e-6))
    assert not extract_regions(sol, 1e-5).any()


def test_value_matches_lattice_oracle(controlled, lattice_reference):
    _, sol = controlled
    for p in lattice_reference["probes"]:
        got = float(sol.value_at([p["x"]], p["t"])[0])
        assert abs(got - p["value"]) <= 5e-2, p


def test_action_set_matches_lattice_oracle(controlled, lattice_reference):
    _, sol = controlled
    x = sol.grid.points()[:, 0]
    for ref in lattice_reference["action_sets"]:
        k = int(round((sol.grid.horizon - ref["t"]) / sol.grid.dt))
        lat = np.interp(x, ref["x"], ref["action"]) > 0.5
        agree = np.mean(lat == sol.action[k])
        assert agree >= 0.9, (ref["t"], agree)
    assert sol.action[-1][np.abs(x) >= 2.8].all()


def test_obstacle_satisfied(controlled):
    _, sol = controlled
    scale = max(1.0, float(np.max(np.abs(sol.values))))
    assert np.all(sol.values <= sol.Mu + 1e-6 * scale)
    assert sol.diagnostics["converged"]
    np.testing.assert_array_equal(extract_regions(sol, 1e-5), sol.action)


def test_solution_residual_examples(controlled):
    spec, sol = controlled
    fake = Solution(sol.grid, sol.Mu.copy(), sol.Mu.copy(), sol.xi, np.ones_like(sol.action), {})
    res = qvi_residual(fake, spec)
    assert res["r2_max"] == 0.0 and res["comp_max"] == 0.0


def _small_controlled(eps, f="x[0]^2"):
    spec = make_problem(diffusion="1", running_cost=f, terminal_cost="0",
                        intervention_cost="0.5 + 0.1*abs(xi[0])",
                        constants={"gamma": 0.2, "delta": 0.5, "mu": 1.0, "K": 0.5, "L_bound": 0.5,
                                   "B_growth": 0.1})
    grid = Grid.make([-3], [3], [61], 41, 1.0)
    return spec, solve_penalized(spec, SolverConfig(grid, epsilon_schedule=eps))


def test_penalty_stays_bounded_across_epsilon():
    _, sol = _small_controlled((0.1, 0.05, 0.025, 0.0125))
    levels = [lv["penalty_max"] for lv in sol.diagnostics["penalty_levels"]]
    assert len(levels) == 4
    for a, b in zip(levels, levels[1:]):
        assert abs(b - a) < 0.5 * max(abs(a), abs(b))


def test_smaller_epsilon_lowers_value():
    _, coarse = _small_controlled((0.1, 0.01))
    _, fine = _small_controlled((0.1, 0.01, 0.005))
    assert np.all(fine.values <= coarse.values + 1e-6)


def test_larger_running_cost_never_lowers_value():
    _, lo = _small_controlled((0.1, 1e-3, 1e-6))
    _, hi = _small_controlled((0.1, 1e-3, 1e-6), f="x[0]^2 + 0.3*exp(-x[0]^2)")
    assert np.all(hi.values >= lo.values - 1e-8)


def test_action_destinations_keep_a_margin(controlled):
    spec, sol = controlled
    grid = sol.grid
    K = spec.constants.K
    for k in range(1, grid.t_count, 25):
        dest = grid.points()[sol.action[k].ravel()] + sol.xi[k][sol.action[k]]
        gap = Field(grid, sol.Mu[k] - sol.values[k]).at(dest)
        assert np.all(gap >= K / 2 - 1e-5 - 2 * grid.h[0] ** 2)


def test_solver_is_deterministic():
    _, a = _small_controlled((0.1, 0.01))
    _, b = _small_controlled((0.1, 0.01))
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.xi, b.xi)


def test_jump_problem_converges():
    spec = shipped("jump_1d")
    grid = Grid.make([-3], [3], [61], 41, spec.horizon)
    sol = solve_penalized(spec, SolverConfig(grid))
    assert sol.diagnostics["converged"]
    assert np.all(sol.values <= sol.Mu + 1e-6)
    assert sol.diagnostics["jump_cfl"] >= 0
