"""Numerical checks of structural properties of a computed value function."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .grid import interpolate
from .model import ProblemSpec
from .operators import _jump_integral
from .sde_sim import FeedbackPolicy, PathConfig, _steps, simulate_paths
from .solver import Solution, _Stepper

__all__ = [
    "CheckReport",
    "check_dpp",
    "check_bounds",
    "check_obstacle_chain",
    "check_viscosity_probe",
    "reports_to_json",
    "reports_from_json",
]


@dataclass
class CheckReport:
    id: str
    status: str  # "pass" | "fail" | "inconclusive"
    margin: float
    witnesses: list = field(default_factory=list)
    tolerances: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "CheckReport":
        d = dict(d)
        d["margin"] = float(d["margin"])
        return cls(**d)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def reports_to_json(reports) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)


def reports_from_json(text: str) -> list:
    return [CheckReport.from_dict(d) for d in json.loads(text)]


def _status(ok: bool) -> str:
    return "pass" if ok else "fail"


# ---------------------------------------------------------------------------
# dynamic programming


def check_dpp(
    spec: ProblemSpec,
    sol: Solution,
    stop_rule: dict,
    x0,
    t0: float,
    cfg: PathConfig,
    abs_tol: Optional[float] = None,
    c_disc: float = 1.0,
    strategy=None,
    jobs: int = 1,
) -> CheckReport:
    """Compare ``V(x0, t0)`` with a Monte Carlo estimate of the dynamic programming right side.

    ``stop_rule`` holds ``s`` (a fixed stopping time), ``box`` (per-axis
    bounds; stop at first exit) or both, in which case the earlier applies.
    The controller follows ``strategy`` (default: the solution's feedback
    policy) up to the stopping time; the stopped state is valued with the
    solution itself.
    """
    x0 = np.asarray(x0, dtype=float)
    grid = sol.grid
    s = stop_rule.get("s")
    box = stop_rule.get("box")
    if s is None and box is None:
        raise ValueError("stop_rule needs 's' and/or 'box'")
    if s is not None and not t0 <= s <= spec.horizon:
        raise ValueError("fixed stopping time must satisfy t0 <= s <= T")
    u0 = float(sol.value_at(x0[None], t0, spec.g)[0])
    _, dt = _steps(t0, spec.horizon, cfg.dt)
    disc_tol = abs_tol if abs_tol is not None else c_disc * (float(np.max(grid.h)) ** 2 + grid.dt + dt)
    tolerances = {"stat": 0.0, "disc": disc_tol}
    if s is not None and s == t0:
        return CheckReport("dpp", "pass", disc_tol, [], tolerances,
                           {"rhs": u0, "u": u0, "residual": 0.0, "stop_rule": stop_rule})
    strategy = FeedbackPolicy(sol) if strategy is None else strategy
    box_arr = None if box is None else (np.asarray(box, dtype=float)[:, 0], np.asarray(box, dtype=float)[:, 1])
    b = simulate_paths(spec, strategy, x0, t0, cfg, stop_time=s, box=box_arr, jobs=jobs)
    r = spec.discount
    value = np.array(b.terminal)
    st = b.stopped
    if np.any(st):
        tau = b.tau[st]
        value[st] = np.exp(-r * (tau - t0)) * sol.value_at(b.x_tau[st], tau, spec.g)
    total = b.running + b.impulse + value
    n = len(total)
    mean = float(np.mean(total))
    stderr = float(np.std(total, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    ci95 = 1.96 * stderr
    tolerances["stat"] = ci95
    tol = ci95 + disc_tol
    residual = abs(mean - u0)
    outside = float(np.mean(st & ~grid.contains(b.x_tau, tol=1e-12)))
    flagged = float(np.mean(b.exploded | b.budget))
    details = {
        "rhs": mean,
        "u": u0,
        "residual": residual,
        "ci95": ci95,
        "n_paths": n,
        "dt": dt,
        "stopped_fraction": float(np.mean(st)),
        "outside_fraction": outside,
        "flagged_fraction": flagged,
        "stop_rule": stop_rule,
    }
    if outside > 0.01 or flagged > 0.01:
        status = "inconclusive"
    else:
        status = _status(residual <= tol)
    witnesses = [] if status == "pass" else [{"x0": x0.tolist(), "t0": t0, "rhs": mean, "u": u0}]
    return CheckReport("dpp", status, tol - residual, witnesses, tolerances, details)


# ---------------------------------------------------------------------------
# growth and regularity


def check_bounds(sol: Solution, spec: ProblemSpec, n_pairs: int = 10_000, seed: int = 0) -> CheckReport:
    """Smallest constants for the growth and Hölder bounds over nodes and slices.

    ``-C_low (T+1) <= V <= C_up (1 + |x|^(gamma+delta))``;
    ``|V(t,x) - V(t,y)| <= C_x (1 + |x|^gamma + |y|^gamma) |x-y|^delta`` and
    ``|V(t,x) - V(s,x)| <= C_t (1 + |x|^(gamma+delta)) |t-s|^(delta/2)``, the
    last two as maxima over ``n_pairs`` sampled pairs each.
    """
    grid = sol.grid
    c = spec.constants
    gam, dlt = c.gamma, c.delta
    T = spec.horizon
    u = sol.values.reshape(grid.t_count, -1)
    pts = grid.points()
    norm = np.linalg.norm(pts, axis=1)
    grow = 1.0 + norm ** (gam + dlt)
    c_low = max(0.0, -float(np.min(u)) / (T + 1))
    c_up = max(0.0, float(np.max(u / grow[None, :])))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 7])))
    k = rng.integers(0, grid.t_count, n_pairs)
    i = rng.integers(0, grid.size, n_pairs)
    j = rng.integers(0, grid.size, n_pairs)
    keep = i != j
    dist = np.linalg.norm(pts[i] - pts[j], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        qx = np.abs(u[k, i] - u[k, j]) / ((1 + norm[i] ** gam + norm[j] ** gam) * dist ** dlt)
    c_x = float(np.max(qx[keep])) if np.any(keep) else 0.0
    k2 = rng.integers(0, grid.t_count, n_pairs)
    i2 = rng.integers(0, grid.size, n_pairs)
    keep_t = k != k2
    gap = np.abs(grid.times[k] - grid.times[k2])
    qt = np.abs(u[k, i2] - u[k2, i2]) / (grow[i2] * np.where(keep_t, gap, 1.0) ** (dlt / 2))
    c_t = float(np.max(qt[keep_t])) if np.any(keep_t) else 0.0
    consts = {"C_low": c_low, "C_up": c_up, "C_x": c_x, "C_t": c_t}
    finite = all(math.isfinite(v) for v in consts.values())
    witnesses = [] if finite else [{"constants": consts}]
    return CheckReport(
        "bounds", _status(finite), 0.0 if finite else -math.inf, witnesses,
        {"gamma": gam, "delta": dlt, "n_pairs": n_pairs}, {"constants": consts, "seed": seed},
    )


# ---------------------------------------------------------------------------
# obstacle structure


def _second_differences(values: np.ndarray, grid) -> np.ndarray:
    """Axis-wise second differences on interior nodes, shape ``(dim,) + shape`` (NaN on the ring)."""
    out = np.full((grid.dim,) + values.shape, np.nan)
    for a in range(grid.dim):
        d2 = (np.roll(values, -1, a) - 2 * values + np.roll(values, 1, a)) / grid.h[a] ** 2
        out[a] = d2
    ring = ~grid.interior_mask(0.0)
    out[:, ring] = np.nan
    return out


def check_obstacle_chain(
    sol: Solution, spec: ProblemSpec, region_tol: float = 1e-5, tol: Optional[float] = None, curvature_tol: float = 1e-6
) -> CheckReport:
    """(a) ``u <= M u + tol``; (b) action destinations keep a ``K/2`` gap to the
    obstacle; (c) second differences of ``M u`` stay below the largest second
    difference of ``u`` over the continuation region."""
    grid = sol.grid
    u = sol.values
    Mu = sol.Mu
    scale = max(1.0, float(np.max(np.abs(u))))
    tol = 1e-6 * scale if tol is None else tol
    witnesses = []

    gap = u - Mu
    worst = np.unravel_index(int(np.argmax(gap)), gap.shape)
    margin_a = tol - float(gap[worst])
    if margin_a < 0:
        witnesses.append({"sub": "a", "slice": int(worst[0]), "node": [int(v) for v in worst[1:]], "excess": float(gap[worst])})

    K = spec.constants.K
    need = K / 2 - region_tol
    margin_b = math.inf
    pts = grid.points()
    for k in range(grid.t_count):
        act = sol.action[k].ravel()
        if not np.any(act):
            continue
        xi = sol.xi[k].reshape(-1, grid.dim)[act]
        dest = pts[act] + xi
        dist = interpolate(Mu[k] - u[k], grid, dest)
        m = int(np.argmin(dist))
        margin_b = min(margin_b, float(dist[m]) - need)
        if dist[m] < need:
            witnesses.append({"sub": "b", "slice": k, "x": pts[act][m].tolist(), "xi": xi[m].tolist(),
                              "destination_gap": float(dist[m])})

    margin_c = math.inf
    for k in range(grid.t_count):
        d2u = _second_differences(u[k], grid)
        d2m = _second_differences(Mu[k], grid)
        cont = ~sol.action[k]
        for a in range(grid.dim):
            bound_vals = d2u[a][cont & np.isfinite(d2u[a])]
            if bound_vals.size == 0:
                continue
            bound = float(np.max(bound_vals))
            vals = d2m[a]
            if not np.any(np.isfinite(vals)):
                continue
            top = float(np.nanmax(vals))
            margin = bound + curvature_tol - top
            if margin < margin_c:
                margin_c = margin
            if margin < 0:
                loc = np.unravel_index(int(np.nanargmax(vals)), vals.shape)
                witnesses.append({"sub": "c", "slice": k, "axis": a, "node": [int(v) for v in loc],
                                  "second_difference": top, "bound": bound})
    margins = {"a": margin_a, "b": margin_b, "c": margin_c}
    ok = all(m >= 0 for m in margins.values())
    return CheckReport(
        "obstacle", _status(ok), min(margins.values()), witnesses[:20],
        {"obstacle": tol, "region": region_tol, "curvature": curvature_tol},
        {"margins": margins, "K": K, "scale": scale},
    )


# ---------------------------------------------------------------------------
# viscosity inequalities


def _quadratic_design(offsets: np.ndarray) -> np.ndarray:
    n = offsets.shape[1]
    cols = [np.ones(len(offsets))]
    cols += [offsets[:, i] for i in range(n)]
    for i, j in itertools.combinations_with_replacement(range(n), 2):
        cols.append(offsets[:, i] * offsets[:, j] * (0.5 if i == j else 1.0))
    return np.stack(cols, axis=1)


def _unpack(coef, n):
    grad = coef[1:1 + n]
    H = np.zeros((n, n))
    for c, (i, j) in zip(coef[1 + n:], itertools.combinations_with_replacement(range(n), 2)):
        H[i, j] = H[j, i] = c
    return grad, H


def _inner_jump_quadratic(spec, x0, t, theta, grad, H):
    """Small-jump part (``|z| < theta``) of the nonlocal operator on a quadratic."""
    total = 0.0
    for lam, z in spec.atoms_at(x0[None], t):
        z = z[0]
        r = float(np.linalg.norm(z))
        if r < theta:
            comp = grad @ z if r < 1.0 else 0.0
            total += float(lam[0]) * (grad @ z + 0.5 * z @ H @ z - comp)
    sm = spec.jumps.small
    if sm is not None and theta > 0:
        second = sm.moment(2.0, 0.0, min(theta, sm.cutoff))
        total += 0.5 * second * float(sum(w * d @ H @ d for d, w in zip(sm.directions, sm.weights)))
    return total


def check_viscosity_probe(
    sol: Solution,
    spec: ProblemSpec,
    theta: float = 0.0,
    n_probes: int = 500,
    seed: int = 0,
    tol: float = 5e-2,
    fit_ratio: float = 0.1,
    touch_tol: Optional[float] = None,
    max_rate: float = 0.01,
) -> CheckReport:
    """Test the sub- and supersolution inequalities with local quadratic test functions.

    At random interior nodes (slices ``k >= 1``) a quadratic is fitted to
    ``u`` on the ``5^n`` neighbourhood and shifted to pass through
    ``u(x0)``.  Probes whose fit residual exceeds ``fit_ratio`` times the
    local variation are skipped.  The quadratic counts as touching from
    above when ``u - phi <= touch_tol`` on the neighbourhood (subsolution
    test) and from below when ``u - phi >= -touch_tol`` (supersolution
    test).  ``touch_tol`` defaults to the fit residual.
    """
    grid = sol.grid
    n = grid.dim
    if any(c < 5 for c in grid.counts):
        raise ValueError("viscosity probe needs at least 5 nodes per axis")
    stepper = _Stepper(spec, grid)
    u = sol.values
    offs = np.array(list(itertools.product(range(-2, 3), repeat=n)))
    design = _quadratic_design(offs * grid.h)
    pinv = np.linalg.pinv(design)
    interior = grid.interior_mask(0.1)
    core = np.zeros(grid.shape, dtype=bool)
    core[tuple(slice(2, c - 2) for c in grid.counts)] = True
    candidates = np.argwhere(interior & core)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 11])))
    if len(candidates) == 0 or grid.t_count < 2:
        return CheckReport("viscosity", "inconclusive", 0.0, [], {"visc": tol}, {"valid": 0})
    pick = rng.integers(0, len(candidates), n_probes)
    slices = rng.integers(1, grid.t_count, n_probes)
    counts = {"valid": 0, "skipped": 0, "sub_tests": 0, "super_tests": 0, "violations": 0}
    witnesses = []
    worst = 0.0
    for node, k in zip(candidates[pick], slices):
        idx = tuple(node)
        nb = tuple((node + offs).T)
        vals = u[k][nb]
        coef = pinv @ vals
        fitted = design @ coef
        resid = float(np.sqrt(np.mean((vals - fitted) ** 2)))
        variation = float(np.max(vals) - np.min(vals))
        if resid > fit_ratio * variation:
            counts["skipped"] += 1
            continue
        counts["valid"] += 1
        grad, H = _unpack(coef, n)
        phi = fitted - coef[0] + u[k][idx]
        diff = vals - phi
        tt = touch_tol if touch_tol is not None else resid
        above = bool(np.max(diff) <= tt + 1e-12)
        below = bool(np.min(diff) >= -tt - 1e-12)
        x0 = grid.points()[np.ravel_multi_index(idx, grid.shape)]
        t = stepper.t_orig[k]
        A = spec.diffusion_matrix(x0[None], t)[0]
        b = spec.drift_at(x0[None], t)[0]
        u0 = float(u[k][idx])
        u_tau = (u0 - float(u[k - 1][idx])) / grid.dt
        L_phi = -float(np.sum(A * H)) - float(b @ grad) + spec.discount * u0
        f0 = float(spec.f(x0[None], np.array([t]))[0])
        jump = 0.0
        if not spec.jumps.empty:
            jump = _inner_jump_quadratic(spec, x0, t, theta, grad, H)
            jump += float(_jump_integral(u[k], u[k], grid, spec, t, x0[None], theta, dphi=grad[None], inner=False)[0])
        d1 = u_tau + L_phi - f0 - jump
        d2 = u0 - float(sol.Mu[k][idx])
        H_val = max(d1, d2)
        bad = False
        if above:
            counts["sub_tests"] += 1
            bad |= H_val > tol
            worst = max(worst, H_val)
        if below:
            counts["super_tests"] += 1
            bad |= H_val < -tol
            worst = max(worst, -H_val)
        if bad:
            counts["violations"] += 1
            if len(witnesses) < 20:
                witnesses.append({"slice": int(k), "node": [int(v) for v in node], "x": x0.tolist(),
                                  "d1": d1, "d2": d2, "above": above, "below": below})
    rate = counts["violations"] / counts["valid"] if counts["valid"] else 0.0
    status = "inconclusive" if counts["valid"] == 0 else _status(rate <= max_rate)
    return CheckReport(
        "viscosity", status, max_rate - rate, witnesses,
        {"visc": tol, "fit_ratio": fit_ratio, "max_rate": max_rate},
        {**counts, "rate": rate, "worst_residual": worst, "seed": seed, "n_probes": n_probes},
    )
