import numpy as np
import pytest

from impulse_qvi.grid import Field, Grid
from impulse_qvi.operators import apply_M
from impulse_qvi.sde_sim import PathConfig
from impulse_qvi.solver import Solution
from impulse_qvi.validation import (
    CheckReport,
    check_bounds,
    check_dpp,
    check_obstacle_chain,
    check_viscosity_probe,
    reports_from_json,
    reports_to_json,
)

from conftest import make_problem, shipped


def artificial(spec, grid, fn):
    """Solution with prescribed values and the matching obstacle."""
    pts = grid.points()
    values = np.stack([fn(pts, tau).reshape(grid.shape) for tau in grid.times])
    Mu, xi = [], []
    for k, tau in enumerate(grid.times):
        m, imap = apply_M(Field(grid, values[k]), spec, spec.horizon - tau)
        Mu.append(m.values)
        xi.append(imap.xi)
    Mu = np.stack(Mu)
    return Solution(grid, values, Mu, np.stack(xi), (Mu - values) <= 1e-5, {})


def exact_heat(spec, n=81, t_count=41):
    grid = Grid.make([-2], [2], [n], t_count, spec.horizon)
    return artificial(spec, grid, lambda p, tau: p[:, 0] ** 2 + 2 * tau)


def test_dpp_with_s_equal_t0_is_exact(heat):
    spec, sol = heat
    rep = check_dpp(spec, sol, {"s": 0.3}, [0.1], 0.3, PathConfig(n_paths=10))
    assert rep.status == "pass" and rep.details["residual"] == 0.0


def test_dpp_on_heat_fixed_time(heat):
    spec, sol = heat
    rep = check_dpp(spec, sol, {"s": 0.75}, [0.0], 0.5, PathConfig(dt=1e-2, n_paths=20000))
    assert rep.status == "pass", rep.to_dict()
    assert rep.details["rhs"] == pytest.approx(1.0, abs=rep.tolerances["stat"] + 1e-2)


def test_dpp_on_heat_exit_box(heat):
    spec, sol = heat
    rep = check_dpp(spec, sol, {"box": [[-1, 1]], "s": 0.9}, [0.0], 0.5, PathConfig(dt=1e-2, n_paths=20000))
    assert rep.status == "pass", rep.to_dict()
    assert 0 < rep.details["stopped_fraction"] <= 1


def test_dpp_at_horizon_matches_policy_gap(controlled):
    from impulse_qvi.sde_sim import evaluate_policy_gap

    spec, sol = controlled
    cfg = PathConfig(dt=1e-2, n_paths=5000)
    rep = check_dpp(spec, sol, {"s": spec.horizon}, [0.5], 0.0, cfg)
    gap = evaluate_policy_gap(spec, sol, [0.5], 0.0, cfg)
    assert rep.details["rhs"] - rep.details["u"] == pytest.approx(gap["gap"], abs=1e-9)


def test_dpp_leaving_box_is_inconclusive(heat):
    spec, sol = heat
    rep = check_dpp(spec, sol, {"s": 0.9}, [1.9], 0.0, PathConfig(dt=1e-2, n_paths=2000))
    assert rep.details["outside_fraction"] > 0.01
    assert rep.status == "inconclusive"
    assert rep.witnesses


def test_dpp_rejects_bad_stop_time(heat):
    spec, sol = heat
    with pytest.raises(ValueError):
        check_dpp(spec, sol, {"s": 0.1}, [0.0], 0.5, PathConfig())
    with pytest.raises(ValueError):
        check_dpp(spec, sol, {}, [0.0], 0.5, PathConfig())


def test_bounds_of_zero_solution():
    spec = make_problem(terminal_cost="0")
    grid = Grid.make([-1], [1], [21], 11, 1.0)
    sol = artificial(spec, grid, lambda p, tau: np.zeros(len(p)))
    rep = check_bounds(sol, spec, n_pairs=2000)
    assert rep.status == "pass"
    assert rep.details["constants"] == {"C_low": 0.0, "C_up": 0.0, "C_x": 0.0, "C_t": 0.0}


def test_bounds_of_heat_solution_respect_quadratic_modulus():
    spec = make_problem(strict=False, intervention_cost="1000000 + xi[0]^2",
                        constants={"gamma": 0.0, "delta": 1.0, "mu": 1.0, "K": 1.0, "L_bound": 1.0})
    sol = exact_heat(spec)
    rep = check_bounds(sol, spec)
    # |x^2 - y^2| <= (|x| + |y|) |x - y| <= 2 * 2 * |x - y| on [-2, 2]
    assert rep.status == "pass"
    assert rep.details["constants"]["C_x"] <= 4.0 / 3.0 + 1e-12


def test_bounds_stable_under_refinement():
    spec = make_problem(strict=False, constants={"gamma": 0.0, "delta": 1.0, "mu": 1.0, "K": 1.0, "L_bound": 1.0})
    a = check_bounds(exact_heat(spec, 81, 41), spec).details["constants"]
    b = check_bounds(exact_heat(spec, 161, 81), spec).details["constants"]
    for key in a:
        assert abs(a[key] - b[key]) <= 0.2 * max(abs(a[key]), abs(b[key])) + 1e-12, key


def test_obstacle_chain_on_heat(heat):
    spec, sol = heat
    rep = check_obstacle_chain(sol, spec)
    assert rep.status == "pass"
    assert rep.details["margins"]["a"] >= 1e5
    assert rep.details["margins"]["b"] == float("inf")


def test_obstacle_chain_on_zero_solution():
    spec = make_problem(terminal_cost="0", intervention_cost="0.7 + xi[0]^2")
    grid = Grid.make([-1], [1], [21], 11, 1.0)
    sol = artificial(spec, grid, lambda p, tau: np.zeros(len(p)))
    rep = check_obstacle_chain(sol, spec)
    assert rep.status == "pass"
    m = rep.details["margins"]
    # the smallest impulse is one grid spacing, so Mu = 0.7 + h^2
    assert m["a"] == pytest.approx(0.7 + grid.h[0] ** 2 + 1e-6, rel=1e-9)
    assert m["b"] == float("inf")
    assert m["c"] == pytest.approx(1e-6, abs=1e-9)


def test_obstacle_chain_on_controlled(controlled):
    spec, sol = controlled
    rep = check_obstacle_chain(sol, spec)
    assert rep.status == "pass", rep.witnesses
    assert all(v > 0 for v in rep.details["margins"].values())


def test_obstacle_violation_has_witness(controlled):
    spec, sol = controlled
    bad = Solution(sol.grid, sol.values + 0.1, sol.Mu, sol.xi, sol.action, {})
    rep = check_obstacle_chain(bad, spec)
    assert rep.status == "fail" and rep.witnesses[0]["sub"] == "a"


def test_viscosity_probe_on_exact_heat():
    spec = make_problem(intervention_cost="1000000 + xi[0]^2")
    rep = check_viscosity_probe(exact_heat(spec), spec, n_probes=200, tol=1e-3)
    assert rep.status == "pass"
    assert rep.details["violations"] == 0 and rep.details["valid"] == 200
    assert rep.details["worst_residual"] <= 1e-3


def test_viscosity_probe_flags_wrong_solution():
    spec = make_problem(running_cost="1", terminal_cost="0", intervention_cost="0.5 + xi[0]^2")
    grid = Grid.make([-2], [2], [41], 21, 1.0)
    sol = artificial(spec, grid, lambda p, tau: np.zeros(len(p)))
    rep = check_viscosity_probe(sol, spec, n_probes=100)
    assert rep.status == "fail"
    assert rep.details["violations"] == rep.details["valid"] > 0
    assert rep.witnesses and rep.witnesses[0]["d1"] == pytest.approx(-1.0)


def test_viscosity_probe_on_controlled(controlled):
    spec, sol = controlled
    rep = check_viscosity_probe(sol, spec, n_probes=300)
    assert rep.status == "pass"
    assert rep.details["rate"] <= 0.01


def test_viscosity_probe_with_jumps():
    from impulse_qvi.solver import SolverConfig, solve_penalized

    spec = shipped("jump_1d")
    grid = Grid.make([-3], [3], [121], 61, spec.horizon)
    sol = solve_penalized(spec, SolverConfig(grid))
    for theta in (0.0, 0.1):
        rep = check_viscosity_probe(sol, spec, theta=theta, n_probes=100)
        assert rep.status == "pass", (theta, rep.details)


def test_reports_round_trip_and_are_deterministic(controlled):
    spec, sol = controlled
    reps = [check_bounds(sol, spec, seed=3), check_obstacle_chain(sol, spec),
            check_viscosity_probe(sol, spec, n_probes=50, seed=3)]
    text = reports_to_json(reps)
    again = reports_from_json(text)
    assert reports_to_json(again) == text
    assert all(isinstance(r, CheckReport) for r in again)
    reps2 = [check_bounds(sol, spec, seed=3), check_obstacle_chain(sol, spec),
             check_viscosity_probe(sol, spec, n_probes=50, seed=3)]
    assert reports_to_json(reps2) == text
