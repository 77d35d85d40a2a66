"""Monte Carlo for the impulse-controlled jump diffusion.

Paths are simulated in fixed blocks of ``BLOCK`` paths.  Block ``b`` draws
from ``Philox(SeedSequence([seed, b]))`` and is always simulated in full,
so path ``i`` depends only on ``(seed, i)`` and not on how many paths are
requested or how blocks are spread over workers.
"""
from __future__ import annotations

import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .expr import compile_expression
from .model import ProblemSpec

__all__ = [
    "NoAction",
    "FeedbackPolicy",
    "FixedSchedule",
    "ThresholdRule",
    "PathConfig",
    "PathRecord",
    "simulate_path",
    "simulate_paths",
    "estimate_cost",
    "evaluate_policy_gap",
]

log = logging.getLogger(__name__)

BLOCK = 1024
GROUP = 16  # blocks advanced together in one vectorised sweep
EXPLODE = 1e8
MAX_PER_STEP = 16


# ---------------------------------------------------------------------------
# strategies
#
# A strategy exposes ``start(n) -> state`` and ``decide(t, X, state) -> (fire, xi)``
# and only sees the current time and state, so it is nonanticipative.


class NoAction:
    name = "none"

    def start(self, n):
        return None

    def decide(self, t, X, state):
        return np.zeros(len(X), dtype=bool), np.zeros_like(X)

    def commit(self, fire, state):
        pass

    def describe(self):
        return {"type": "none"}


class FeedbackPolicy:
    """Impulses read from a solved action mask and impulse map.

    Lookup is nearest node in space and nearest slice in inverted time
    ``tau = T - t``.
    """

    name = "policy"

    def __init__(self, solution):
        self.sol = solution
        self.grid = solution.grid

    def start(self, n):
        return None

    def decide(self, t, X, state):
        grid = self.grid
        k = int(grid.nearest_slice(grid.horizon - t))
        idx = tuple(grid.nearest_index(X).T)
        xi = self.sol.xi[k][idx]
        fire = self.sol.action[k][idx] & (np.linalg.norm(xi, axis=1) > 0)
        return fire, np.where(fire[:, None], xi, 0.0)

    def commit(self, fire, state):
        pass

    def describe(self):
        return {"type": "policy"}


class FixedSchedule:
    """State-independent impulses ``[(t_k, xi_k)]``; each fires at the first step time ``>= t_k``."""

    name = "schedule"

    def __init__(self, events):
        events = sorted(((float(t), np.atleast_1d(np.asarray(xi, dtype=float))) for t, xi in events), key=lambda e: e[0])
        for _, xi in events:
            if not np.any(xi != 0):
                raise ValueError("scheduled impulse must be nonzero")
        self.times = np.array([e[0] for e in events])
        self.xis = np.array([e[1] for e in events]) if events else np.zeros((0, 1))

    def start(self, n):
        return np.zeros(n, dtype=np.int64)

    def decide(self, t, X, state):
        n_ev = len(self.times)
        pending = state < n_ev
        nxt = np.minimum(state, max(n_ev - 1, 0))
        fire = pending & (self.times[nxt] <= t + 1e-12) if n_ev else pending
        xi = np.zeros_like(X)
        if n_ev:
            xi[fire] = self.xis[nxt[fire]]
        return fire, xi

    def commit(self, fire, state):
        state[fire] += 1

    def describe(self):
        return {"type": "schedule", "events": [[float(t), xi.tolist()] for t, xi in zip(self.times, self.xis)]}


class ThresholdRule:
    """Impulse ``xi(x, t)`` whenever ``trigger(x, t) > 0`` (zero impulses are skipped)."""

    name = "threshold"

    def __init__(self, trigger: str, impulse, dim: int):
        impulse = [impulse] if isinstance(impulse, str) else list(impulse)
        if len(impulse) != dim:
            raise ValueError(f"threshold impulse needs {dim} expressions, got {len(impulse)}")
        self.trigger_src = trigger
        self.impulse_src = impulse
        self.trigger = compile_expression(trigger, allowed={"x", "t"})
        self.impulse = [compile_expression(e, allowed={"x", "t"}) for e in impulse]

    def start(self, n):
        return None

    def decide(self, t, X, state):
        tt = np.full(len(X), t)
        on = np.broadcast_to(self.trigger(x=X, t=tt), (len(X),)) > 0
        xi = np.stack([np.broadcast_to(e(x=X, t=tt), (len(X),)) for e in self.impulse], axis=-1)
        fire = on & np.all(np.isfinite(xi), axis=1) & (np.linalg.norm(xi, axis=1) > 0)
        return fire, np.where(fire[:, None], xi, 0.0)

    def commit(self, fire, state):
        pass

    def describe(self):
        return {"type": "threshold", "trigger": self.trigger_src, "impulse": self.impulse_src}


# ---------------------------------------------------------------------------
# configuration and records


@dataclass(frozen=True)
class PathConfig:
    dt: float = 1e-3
    n_paths: int = 10_000
    seed: int = 0
    max_impulses_per_path: int = 1000
    theta: float = 1e-2  # small-jump split radius; jumps below theta/10 are dropped
    small_jump_floor: Optional[float] = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.max_impulses_per_path < 1:
            raise ValueError("max_impulses_per_path must be >= 1")

    @property
    def floor(self) -> float:
        return self.theta / 10 if self.small_jump_floor is None else self.small_jump_floor

    def to_dict(self):
        return {
            "dt": self.dt,
            "n_paths": self.n_paths,
            "seed": self.seed,
            "max_impulses_per_path": self.max_impulses_per_path,
            "theta": self.theta,
            "small_jump_floor": self.small_jump_floor,
        }

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown Monte Carlo settings: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PathRecord:
    times: np.ndarray
    states: np.ndarray
    impulses: list
    running_cost: float
    intervention_cost: float
    terminal_cost: float
    exploded: bool = False
    budget_exceeded: bool = False

    @property
    def total(self) -> float:
        return self.running_cost + self.intervention_cost + self.terminal_cost

    def to_csv(self) -> str:
        n = self.states.shape[1]
        buf = io.StringIO()
        buf.write(",".join(["t"] + [f"x{i}" for i in range(n)] + ["impulses"]) + "\n")
        counts = {}
        for t, _ in self.impulses:
            counts[t] = counts.get(t, 0) + 1
        for t, x in zip(self.times, self.states):
            row = [repr(float(t))] + [repr(float(v)) for v in x] + [str(counts.get(float(t), 0))]
            buf.write(",".join(row) + "\n")
        return buf.getvalue()


@dataclass
class _Batch:
    """Per-path results of one simulation sweep."""

    running: np.ndarray
    impulse: np.ndarray
    terminal: np.ndarray
    exploded: np.ndarray
    budget: np.ndarray
    tau: np.ndarray
    x_tau: np.ndarray
    stopped: np.ndarray
    times: Optional[np.ndarray] = None
    paths: Optional[np.ndarray] = None
    events: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# engine


class _SmallJumpSampler:
    """Compound-Poisson part of the small jumps with radius in ``[floor, cutoff)``."""

    def __init__(self, spec: ProblemSpec, floor: float):
        sm = spec.jumps.small
        self.sm = sm
        self.active = sm is not None and floor < sm.cutoff
        self.neglected = 0.0 if sm is None else sm.moment(1.0, 0.0, min(floor, sm.cutoff))
        if not self.active:
            self.rate = 0.0
            self.drift = 0.0
            return
        s = np.geomspace(floor, sm.cutoff, 4097)
        dens = np.asarray(sm.rho(s), dtype=float)
        # trapezoid CDF on a geometric grid, inverted by linear interpolation
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(s))])
        self.rate = float(cdf[-1])
        self.cdf = cdf / cdf[-1]
        self.s = s
        mean_dir = sm.weights @ sm.directions
        # compensator of the simulated range: all small jumps have |z| < 1
        self.drift = -sm.moment(1.0, floor, sm.cutoff) * mean_dir
        self.cum_w = np.cumsum(sm.weights)

    def sample(self, rng, counts):
        total = int(counts.sum())
        n = self.sm.directions.shape[1]
        out = np.zeros((len(counts), n))
        if total == 0:
            return out
        u = rng.random(total)
        radius = np.interp(u, self.cdf, self.s)
        d = np.minimum(np.searchsorted(self.cum_w, rng.random(total), side="right"), len(self.cum_w) - 1)
        z = radius[:, None] * self.sm.directions[d]
        owner = np.repeat(np.arange(len(counts)), counts)
        np.add.at(out, owner, z)
        return out


def _generators(seed, blocks):
    return [np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(b)]))) for b in blocks]


def _steps(t0, horizon, dt):
    span = horizon - t0
    n = max(1, int(math.ceil(span / dt - 1e-9)))
    return n, span / n


def _simulate(spec, strategy, x0, t0, cfg, blocks, stop_time=None, box=None, record=False):
    """Advance the full blocks in ``blocks`` from ``(x0, t0)``; optional stopping at
    ``stop_time`` or on leaving ``box`` (checked at step times, after impulses)."""
    n = spec.dim
    m = spec.noise_dim
    rngs = _generators(cfg.seed, blocks)
    N = BLOCK * len(blocks)
    T = spec.horizon
    n_steps, h = _steps(t0, T, cfg.dt)
    r = spec.discount
    X = np.tile(np.asarray(x0, dtype=float).reshape(1, n), (N, 1))
    alive = np.ones(N, dtype=bool)  # not stopped, not exploded
    exploded = np.zeros(N, dtype=bool)
    budget = np.zeros(N, dtype=bool)
    n_imp = np.zeros(N, dtype=np.int64)
    running = np.zeros(N)
    impulse = np.zeros(N)
    terminal = np.zeros(N)
    tau = np.full(N, T)
    x_tau = np.zeros((N, n))
    stopped = np.zeros(N, dtype=bool)
    small = _SmallJumpSampler(spec, cfg.floor)
    state = strategy.start(N)
    times = t0 + h * np.arange(n_steps + 1)
    times[-1] = T
    traj = np.empty((n_steps + 1, N, n)) if record else None
    events = []

    def disc(t):
        return math.exp(-r * (t - t0))

    def act(t):
        for _ in range(MAX_PER_STEP):
            fire, xi = strategy.decide(t, X, state)
            fire &= alive & ~budget
            if not np.any(fire):
                return
            strategy.commit(fire, state)
            cost = spec.B(xi[fire], np.full(int(fire.sum()), t))
            impulse[fire] += disc(t) * cost
            X[fire] += xi[fire]
            n_imp[fire] += 1
            if record:
                events.extend((int(i), float(t), xi[i].copy()) for i in np.flatnonzero(fire))
            budget[:] |= n_imp >= cfg.max_impulses_per_path

    def check_stop(k, t):
        if stop_time is None and box is None:
            return
        hit = np.zeros(N, dtype=bool)
        if stop_time is not None and t >= stop_time - 1e-12:
            hit[:] = True
        if box is not None:
            lo, hi = box
            hit |= np.any((X < lo) | (X > hi), axis=1)
        hit &= alive
        if np.any(hit):
            tau[hit] = t
            x_tau[hit] = X[hit]
            stopped[hit] = True
            alive[hit] = False

    act(t0)
    check_stop(0, t0)
    f_prev = spec.f(X, np.full(N, t0)) * disc(t0)
    if record:
        traj[0] = X
    for k in range(n_steps):
        t = times[k]
        t_next = times[k + 1]
        dtk = t_next - t
        tt = np.full(N, t)
        drift = spec.drift_at(X, tt)
        sig = spec.sigma_at(X, tt)
        z = np.concatenate([g.standard_normal((BLOCK, m)) for g in rngs])
        dX = drift * dtk + np.einsum("pij,pj->pi", sig, z) * math.sqrt(dtk)
        for lam, size in spec.atoms_at(X, tt):
            lam = np.broadcast_to(np.asarray(lam, dtype=float), (N,))
            cnt = np.concatenate([g.poisson(lam[i * BLOCK:(i + 1) * BLOCK] * dtk) for i, g in enumerate(rngs)])
            zsz = np.broadcast_to(size, (N, n))
            dX += cnt[:, None] * zsz
            # compensate atoms with |z| < 1
            small_atom = np.linalg.norm(zsz, axis=1) < 1.0
            dX -= (small_atom * lam)[:, None] * zsz * dtk
        if small.active:
            parts = []
            for i, g in enumerate(rngs):
                cnt = g.poisson(small.rate * dtk, size=BLOCK)
                parts.append(small.sample(g, cnt))
            dX += np.concatenate(parts) + small.drift * dtk
        X_new = np.where(alive[:, None], X + dX, X)
        boom = alive & ~np.all(np.isfinite(X_new) & (np.abs(X_new) <= EXPLODE), axis=1)
        if np.any(boom):
            exploded |= boom
            alive &= ~boom
            X_new[boom] = X[boom]
        X = X_new
        f_new = spec.f(X, np.full(N, t_next)) * disc(t_next)
        running += np.where(alive, 0.5 * (f_prev + f_new) * dtk, 0.0)
        act(t_next)
        if k + 1 < n_steps:
            check_stop(k + 1, t_next)
        f_prev = spec.f(X, np.full(N, t_next)) * disc(t_next)
        if record:
            traj[k + 1] = X
    live = alive & ~stopped
    terminal[live] = disc(T) * spec.g(X[live])
    tau[live] = T
    x_tau[live] = X[live]
    # exploded paths keep their last finite state
    x_tau[exploded] = X[exploded]
    return _Batch(running, impulse, terminal, exploded, budget, tau, x_tau, stopped, times, traj, events)


def _block_range(n_paths):
    return list(range((n_paths + BLOCK - 1) // BLOCK))


def _run_group(args):
    spec, strategy, x0, t0, cfg, blocks, stop_time, box = args
    b = _simulate(spec, strategy, x0, t0, cfg, blocks, stop_time, box)
    return blocks, b


def simulate_paths(spec, strategy, x0, t0, cfg: PathConfig, stop_time=None, box=None, jobs: int = 1) -> _Batch:
    """Per-path results for paths ``0 .. n_paths-1`` (blocks grouped, then truncated)."""
    _check_start(spec, x0, t0)
    blocks = _block_range(cfg.n_paths)
    groups = [blocks[i:i + GROUP] for i in range(0, len(blocks), GROUP)]
    tasks = [(spec, strategy, x0, t0, cfg, g, stop_time, box) for g in groups]
    if jobs > 1 and len(groups) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_group, tasks))
    else:
        results = [_run_group(task) for task in tasks]
    results.sort(key=lambda r: r[0][0])
    keys = ("running", "impulse", "terminal", "exploded", "budget", "tau", "x_tau", "stopped")
    merged = {k: np.concatenate([getattr(b, k) for _, b in results])[: cfg.n_paths] for k in keys}
    return _Batch(**merged)


def _check_start(spec, x0, t0):
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (spec.dim,):
        raise ValueError(f"x0 must have {spec.dim} components")
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be finite")
    if not 0 <= t0 < spec.horizon:
        raise ValueError(f"t0 must lie in [0, {spec.horizon})")


def simulate_path(spec, strategy, x0, t0, cfg: PathConfig, path_index: int) -> PathRecord:
    """Full record of path ``path_index`` (identical to its contribution in :func:`estimate_cost`)."""
    _check_start(spec, x0, t0)
    block, row = divmod(int(path_index), BLOCK)
    b = _simulate(spec, strategy, x0, t0, cfg, [block], record=True)
    events = [(t, xi) for i, t, xi in b.events if i == row]
    return PathRecord(
        times=b.times,
        states=b.paths[:, row, :].copy(),
        impulses=events,
        running_cost=float(b.running[row]),
        intervention_cost=float(b.impulse[row]),
        terminal_cost=float(b.terminal[row]),
        exploded=bool(b.exploded[row]),
        budget_exceeded=bool(b.budget[row]),
    )


def _summary(values, flagged, cfg, dt, neglected):
    n = len(values)
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if n > 1 else 0.0
    stderr = std / math.sqrt(n)
    frac = float(np.mean(flagged))
    return {
        "mean": mean,
        "stderr": stderr,
        "ci95": 1.96 * stderr,
        "n_paths": n,
        "dt": dt,
        "flags": {
            "flagged_fraction": frac,
            "unreliable": frac > 0.01,
            "neglected_small_jump_mass": neglected,
        },
    }


def estimate_cost(spec, strategy, x0, t0, cfg: PathConfig, richardson: bool = False, jobs: int = 1) -> dict:
    """Mean total cost with standard error and 95% half-width.

    With ``richardson`` the estimate is repeated at ``dt/2`` and ``dt/4``
    and a first-order extrapolation ``2 J(dt/4) - J(dt/2)`` is reported.
    """
    x0 = np.asarray(x0, dtype=float)
    b = simulate_paths(spec, strategy, x0, t0, cfg, jobs=jobs)
    _, dt = _steps(t0, spec.horizon, cfg.dt)
    neglected = _SmallJumpSampler(spec, cfg.floor).neglected
    out = _summary(b.running + b.impulse + b.terminal, b.exploded | b.budget, cfg, dt, neglected)
    out["flags"]["exploded"] = int(b.exploded.sum())
    out["flags"]["budget_exceeded"] = int(b.budget.sum())
    if out["flags"]["unreliable"]:
        log.warning("more than 1%% of paths flagged; estimate unreliable")
    if richardson:
        levels = [{"dt": out["dt"], "mean": out["mean"], "stderr": out["stderr"]}]
        for div in (2, 4):
            sub = estimate_cost(spec, strategy, x0, t0, _replace(cfg, dt=cfg.dt / div), jobs=jobs)
            levels.append({"dt": sub["dt"], "mean": sub["mean"], "stderr": sub["stderr"]})
        out["richardson"] = {
            "levels": levels,
            "extrapolated": 2 * levels[2]["mean"] - levels[1]["mean"],
            "bias_estimate": levels[1]["mean"] - levels[2]["mean"],
        }
    return out


def _replace(cfg, **kw):
    d = cfg.to_dict()
    d.update(kw)
    return PathConfig(**d)


def evaluate_policy_gap(spec, sol, x0, t0, cfg: PathConfig, strategy=None, tol: float = 5e-2, jobs: int = 1) -> dict:
    """``J(strategy) - V(x0, t0)``; the strategy defaults to the solution's own feedback policy.

    Any strategy costs at least the value function, so the gap should not
    fall below ``-(ci95 + tol)``.
    """
    strategy = FeedbackPolicy(sol) if strategy is None else strategy
    est = estimate_cost(spec, strategy, x0, t0, cfg, jobs=jobs)
    value = float(sol.value_at(np.atleast_2d(x0), t0, spec.g)[0])
    gap = est["mean"] - value
    return {
        "x0": np.asarray(x0, dtype=float).tolist(),
        "t0": t0,
        "estimate": est,
        "value": value,
        "gap": gap,
        "tol": tol,
        "lower_bound_ok": gap >= -(est["ci95"] + tol),
    }
