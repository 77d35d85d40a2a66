import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from impulse_qvi.model import (
    AssumptionViolation,
    ProblemError,
    eval_coeffs,
    parse_problem,
    render_problem,
    validate_assumptions,
)

from conftest import BASE, CONFIGS, make_problem


def test_zero_drift_sqrt2_diffusion_gives_unit_A():
    spec = make_problem()
    c = eval_coeffs(spec, [0.3], 0.2)
    assert c.b.tolist() == [0.0]
    assert c.A == pytest.approx(np.array([[1.0]]), abs=1e-15)


def test_dominance_violation_rejected():
    with pytest.raises(AssumptionViolation, match="dominance violated: γ\\+δ ≥ μ"):
        make_problem(constants={"gamma": 0.5, "delta": 0.5, "mu": 0.9})


def test_non_strict_parse_keeps_bad_constants():
    doc = dict(BASE, constants={"gamma": 0.5, "delta": 0.5, "mu": 0.9})
    spec = parse_problem(json.dumps(doc), strict=False)
    rep = validate_assumptions(spec, [-1, 1], samples=50)
    assert rep[7].status == "fail" and rep[7].worst_point is not None


def test_running_cost_expression():
    spec = make_problem(running_cost="x[0]^2 + t")
    assert float(spec.f(np.array([2.0]), 1.0)) == 5.0


@pytest.mark.parametrize(
    "patch, message",
    [
        ({"drift": "x[1]"}, "dimension mismatch"),
        ({"drift": ["0", "0"]}, "dimension mismatch"),
        ({"running_cost": "x[0] + y"}, "unknown symbol"),
        ({"terminal_cost": "x[0] + t"}, "unknown symbol"),
        ({"horizon": 0}, "horizon"),
        ({"discount": -1}, "discount"),
        ({"dim": 0}, "dim"),
    ],
)
def test_invalid_documents(patch, message):
    with pytest.raises(ProblemError, match=message):
        make_problem(**patch)


def test_syntax_error_reports_line_and_column():
    with pytest.raises(ProblemError, match="line 2 column"):
        parse_problem('{"dim": 1,\n  "horizon" 1}')


def test_lipschitz_estimate_of_identity_drift():
    rep = validate_assumptions(make_problem(drift="x[0]"), [-1, 1], samples=500, seed=3)
    assert rep[2].status == "pass"
    assert rep[2].estimates["b"] == pytest.approx(1.0, abs=1e-9)


def test_no_terminal_impulse_holds_for_quadratic_cost():
    spec = make_problem(terminal_cost="0", intervention_cost="1 + xi[0]^2")
    rep = validate_assumptions(spec, [-1, 1], samples=500)
    assert rep[8].status == "pass"
    assert rep[8].margin >= 1.0 - 1e-12


def test_no_terminal_impulse_fails_when_moving_is_free():
    spec = make_problem(terminal_cost="x[0]^2", intervention_cost="1 + xi[0]^2",
                        constants={"gamma": 0.2, "delta": 0.5, "mu": 1.0, "K": 1.0, "L_bound": 1.0})
    # g(x+xi) + B - g(x) = 1 + 2 x xi + 2 xi^2 > 0 always, so this passes too
    assert validate_assumptions(spec, [-1, 1], samples=200)[8].status == "pass"
    spec = make_problem(terminal_cost="10*x[0]^2", intervention_cost="1 + xi[0]^2")
    rep = validate_assumptions(spec, [-2, 2], samples=500)
    assert rep[8].status == "fail"
    assert set(rep[8].worst_point) == {"x", "xi"}


def test_linear_cost_fails_subadditivity_slack_with_witness():
    spec = make_problem(intervention_cost="abs(xi[0])",
                        constants={"gamma": 0.2, "delta": 0.5, "mu": 1.0, "K": 0.5, "L_bound": 1.0})
    rep = validate_assumptions(spec, [-1, 1], samples=500)
    e = rep[6]
    assert e.status == "fail"
    assert e.worst_point is not None and "eta" in e.worst_point
    assert e.estimates["K_hat"] == pytest.approx(0.0, abs=1e-12)


def test_fail_entries_always_have_witness():
    spec = make_problem(intervention_cost="abs(xi[0])", terminal_cost="10*x[0]^2",
                        constants={"gamma": 0.2, "delta": 0.5, "mu": 1.0, "K": 0.5, "L_bound": 0.0})
    rep = validate_assumptions(spec, [-2, 2], samples=300)
    assert not rep.ok
    for e in rep.entries:
        if e.status == "fail":
            assert e.worst_point is not None


def test_holder_blowup_detected():
    spec = make_problem(running_cost="sqrt(abs(x[0]))",
                        constants={"gamma": 0.0, "delta": 0.9, "mu": 1.0, "K": 1.0, "L_bound": 1.0})
    assert validate_assumptions(spec, [-1, 1], samples=500)[4].status == "fail"
    spec = make_problem(running_cost="sqrt(abs(x[0]))",
                        constants={"gamma": 0.0, "delta": 0.5, "mu": 1.0, "K": 1.0, "L_bound": 1.0})
    assert validate_assumptions(spec, [-1, 1], samples=500)[4].status == "pass"


def test_jump_entries_skipped_without_jumps():
    rep = validate_assumptions(make_problem(), [-1, 1], samples=50)
    assert [rep[i].status for i in (9, 10, 11)] == ["skipped"] * 3


def test_order_delta_bound_checked():
    jumps = {"small_density": {"density": "0.2*s^-1.2", "cutoff": 0.5}, "order_delta_bound": 2.0}
    assert validate_assumptions(make_problem(jumps=jumps), [-1, 1], samples=50)[10].status == "pass"
    jumps["order_delta_bound"] = 0.01
    assert validate_assumptions(make_problem(jumps=jumps), [-1, 1], samples=50)[10].status == "fail"


def test_diagonal_sigma_gives_half_square():
    spec = make_problem(dim=2, drift=["0", "0"], diffusion=[["1", "0"], ["0", "2"]],
                        terminal_cost="0", intervention_cost="1 + xi[0]^2 + xi[1]^2")
    np.testing.assert_allclose(eval_coeffs(spec, [0.1, -0.4], 0.0).A, np.diag([0.5, 2.0]))


def test_atoms_reported_pointwise():
    spec = make_problem(jumps={"atoms": [{"intensity": "2", "size": ["1"]}]})
    (lam, z), = eval_coeffs(spec, [0.7], 0.3).jump_atoms
    assert lam == 2.0 and z.tolist() == [1.0]


def test_nonfinite_coefficient_raises():
    spec = make_problem(running_cost="log(x[0])")
    with pytest.raises(ProblemError, match="non-finite"):
        eval_coeffs(spec, [-1.0], 0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=2), st.floats(0, 0.5))
def test_diffusion_matrix_is_psd(x, t):
    spec = parse_problem((CONFIGS / "problems" / "controlled_2d.json").read_text())
    A = eval_coeffs(spec, x, t).A
    np.testing.assert_allclose(A, A.T, atol=0)
    assert np.linalg.eigvalsh(A).min() >= -1e-12


@pytest.mark.parametrize("name", ["heat_baseline", "controlled_1d", "jump_1d", "controlled_2d"])
def test_render_round_trip(name):
    spec = parse_problem((CONFIGS / "problems" / f"{name}.json").read_text())
    again = parse_problem(render_problem(spec))
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, (100, spec.dim))
    t = rng.uniform(0, spec.horizon, 100)
    for fn in ("drift_at", "sigma_at", "f"):
        np.testing.assert_allclose(getattr(spec, fn)(x, t), getattr(again, fn)(x, t), atol=1e-12)
    np.testing.assert_allclose(spec.g(x), again.g(x), atol=1e-12)
    np.testing.assert_allclose(spec.B(x, t), again.B(x, t), atol=1e-12)
    for (l1, z1), (l2, z2) in zip(spec.atoms_at(x, t), again.atoms_at(x, t)):
        np.testing.assert_allclose(l1, l2, atol=1e-12)
        np.testing.assert_allclose(z1, z2, atol=1e-12)
    assert again.constants == spec.constants


def test_builtin_coefficients():
    spec = make_problem(
        drift={"type": "affine", "const": 1.0, "linear": [2.0], "time": 3.0},
        running_cost={"type": "table", "knots": [0, 1], "values": [0, 2]},
        terminal_cost={"type": "quadratic", "matrix": [[1.0]]},
    )
    x = np.array([[0.25]])
    assert float(spec.drift_at(x, np.array([1.0]))[0, 0]) == pytest.approx(4.5)
    assert float(spec.f(x, np.array([0.0]))[0]) == pytest.approx(0.5)
    assert float(spec.g(x)[0]) == pytest.approx(0.0625)
    again = parse_problem(render_problem(spec))
    assert float(again.drift_at(x, np.array([1.0]))[0, 0]) == pytest.approx(4.5)


def test_validation_is_deterministic():
    spec = parse_problem((CONFIGS / "problems" / "jump_1d.json").read_text())
    a = validate_assumptions(spec, [-3, 3], samples=300, seed=7).to_dict()
    b = validate_assumptions(spec, [-3, 3], samples=300, seed=7).to_dict()
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


@pytest.mark.parametrize("name, box", [("heat_baseline", [-2, 2]), ("controlled_1d", [-3, 3]),
                                       ("jump_1d", [-3, 3]), ("controlled_2d", [[-2, 2], [-2, 2]])])
def test_shipped_examples_pass(name, box):
    spec = parse_problem((CONFIGS / "problems" / f"{name}.json").read_text())
    rep = validate_assumptions(spec, box, samples=1000)
    assert rep.ok, [e.to_dict() for e in rep.entries if e.status == "fail"]
