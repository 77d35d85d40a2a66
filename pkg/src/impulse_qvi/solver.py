"""Penalized solver for the time-inverted impulse-control QVI.

The solver works with ``u(x, tau) = V(x, T - tau)`` so ``u(., 0) = g`` and
each implicit step solves

    (u - u_prev)/dt + L u - f - I u_prev + beta_eps(u - Psi) = 0

by damped Newton.  ``Psi = M u`` is frozen per outer iteration and the
penalty parameter is driven down a continuation schedule inside each one.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import solve_banded

from .grid import Field, Grid, ImpulseMap, interpolate
from .model import ProblemSpec
from .operators import _jump_integral, apply_M, assemble_L, jump_intensity

__all__ = [
    "PenaltyFamily",
    "SolverConfig",
    "Solution",
    "SolverError",
    "NewtonError",
    "beta_eval",
    "solve_linear",
    "solve_penalized",
    "extract_regions",
    "qvi_residual",
]

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class NewtonError(SolverError):
    pass


# ---------------------------------------------------------------------------
# penalty


@dataclass(frozen=True)
class PenaltyFamily:
    """``beta(x) = x/eps`` for ``x >= 0`` and ``a (exp(x/(a eps)) - 1)`` below,
    with ``a = min(eps, 1)``.

    Both branches have slope ``1/eps`` at 0; the negative branch is convex,
    bounded below by ``-a >= -1`` and vanishes as ``eps -> 0``.
    """

    epsilon: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")

    @property
    def floor(self) -> float:
        return min(self.epsilon, 1.0)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        a = self.floor
        with np.errstate(over="ignore", under="ignore"):
            neg = a * np.expm1(np.minimum(x, 0.0) / (a * self.epsilon))
        return np.where(x >= 0, x / self.epsilon, neg)

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        a = self.floor
        with np.errstate(over="ignore", under="ignore"):
            neg = np.exp(np.minimum(x, 0.0) / (a * self.epsilon)) / self.epsilon
        return np.where(x >= 0, 1.0 / self.epsilon, neg)


def beta_eval(family: PenaltyFamily, x):
    return family(x)


# ---------------------------------------------------------------------------
# configuration / result


DEFAULT_EPSILONS = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8)


@dataclass
class SolverConfig:
    grid: Grid
    epsilon_schedule: tuple = DEFAULT_EPSILONS
    theta: float = 0.0
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    obstacle_tol: float = 1e-8
    obstacle_max_iter: int = 100
    region_tol: float = 1e-5
    search: Optional[np.ndarray] = None
    quad_nodes: int = 64

    def __post_init__(self):
        eps = tuple(float(e) for e in self.epsilon_schedule)
        if not eps or any(e <= 0 for e in eps):
            raise ValueError("epsilon_schedule must be a nonempty list of positive numbers")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ValueError("epsilon_schedule must be strictly decreasing")
        self.epsilon_schedule = eps
        for name in ("newton_tol", "obstacle_tol", "region_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.theta < 0:
            raise ValueError("theta must be >= 0")
        if self.newton_max_iter < 1 or self.obstacle_max_iter < 1:
            raise ValueError("iteration limits must be >= 1")
        if self.search is not None:
            self.search = np.asarray(self.search, dtype=float).reshape(self.grid.dim, 2)

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "epsilon_schedule": list(self.epsilon_schedule),
            "theta": self.theta,
            "newton_tol": self.newton_tol,
            "newton_max_iter": self.newton_max_iter,
            "obstacle_tol": self.obstacle_tol,
            "obstacle_max_iter": self.obstacle_max_iter,
            "region_tol": self.region_tol,
            "search": None if self.search is None else self.search.tolist(),
            "quad_nodes": self.quad_nodes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        d = dict(d)
        grid = d.pop("grid")
        if not isinstance(grid, Grid):
            grid = Grid.from_dict(grid)
        if "epsilon_schedule" in d:
            d["epsilon_schedule"] = tuple(d["epsilon_schedule"])
        known = set(cls.__dataclass_fields__) - {"grid"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown solver settings: {sorted(unknown)}")
        return cls(grid=grid, **d)


@dataclass
class Solution:
    """Value slices in inverted time: ``values[k]`` is ``u(., tau_k) = V(., T - tau_k)``."""

    grid: Grid
    values: np.ndarray
    Mu: np.ndarray
    xi: np.ndarray
    action: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def t_count(self) -> int:
        return self.grid.t_count

    def field(self, k: int) -> Field:
        return Field(self.grid, self.values[k])

    @property
    def continuation(self) -> np.ndarray:
        return ~self.action

    def impulse_map(self, k: int) -> ImpulseMap:
        return ImpulseMap(self.grid, self.xi[k], self.action[k])

    def value_at(self, x, t, extension=None) -> np.ndarray:
        """``V(x, t)`` in original time: multilinear in space, linear in time."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        tau = np.clip(self.grid.horizon - np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1]), 0, None)
        s = tau / self.grid.dt
        k0 = np.clip(np.floor(s).astype(int), 0, self.t_count - 2)
        w = np.clip(s - k0, 0.0, 1.0)
        out = np.empty(len(x))
        for k in np.unique(k0):
            sel = k0 == k
            a = interpolate(self.values[k], self.grid, x[sel], extension)
            b = interpolate(self.values[k + 1], self.grid, x[sel], extension)
            out[sel] = (1 - w[sel]) * a + w[sel] * b
        return out


# ---------------------------------------------------------------------------
# time marching


class _Stepper:
    """Per-slice operators shared by every march of one solve."""

    def __init__(self, spec: ProblemSpec, grid: Grid, cfg: Optional[SolverConfig] = None, rhs=None):
        self.spec = spec
        self.grid = grid
        self.cfg = cfg
        self.pts = grid.points()
        self.dt = grid.dt
        self.t_orig = grid.horizon - grid.times
        if spec.time_dependent:
            self.L = [assemble_L(grid, spec, t) for t in self.t_orig]
        else:
            op = assemble_L(grid, spec, self.t_orig[0])
            self.L = [op] * grid.t_count
        self.monotone = all(op.monotone for op in self.L)
        rhs = rhs if rhs is not None else spec.f
        self.f = [np.asarray(rhs(self.pts, np.full(grid.size, t)), dtype=float) for t in self.t_orig]
        eye = sp.identity(grid.size, format="csr") / self.dt
        self.base = [(eye + op.matrix).tocsc() for op in self.L]
        self.bands = [_to_banded(m) for m in self.base]
        self.has_jumps = not spec.jumps.empty
        self.theta = 0.0 if cfg is None else cfg.theta
        self.quad = 64 if cfg is None else cfg.quad_nodes

    def jump(self, u_prev: np.ndarray, k: int) -> np.ndarray:
        if not self.has_jumps:
            return 0.0
        vals = u_prev.reshape(self.grid.shape)
        return _jump_integral(vals, vals, self.grid, self.spec, self.t_orig[k], None, self.theta, self.quad)

    def rhs(self, u_prev: np.ndarray, k: int) -> np.ndarray:
        """Everything in the step equation that does not depend on the unknown."""
        return u_prev / self.dt + self.f[k] + self.jump(u_prev, k) - self.L[k].offset


_MAX_BANDWIDTH = 256


def _to_banded(mat: sp.csc_matrix):
    """``(width, ab)`` in ``solve_banded`` layout, or None if the band is too wide."""
    coo = mat.tocoo()
    off = coo.col - coo.row
    width = int(np.max(np.abs(off))) if len(off) else 0
    if width > _MAX_BANDWIDTH:
        return None
    ab = np.zeros((2 * width + 1, mat.shape[0]))
    np.add.at(ab, (width - off, coo.col), coo.data)
    return width, ab


def _solve(stepper, k, diag, rhs):
    """Solve ``(base_k + diag(diag)) x = rhs``."""
    band = stepper.bands[k]
    if band is not None:
        width, ab = band
        if diag is not None:
            ab = ab.copy()
            ab[width] += diag
        return solve_banded((width, width), ab, rhs, check_finite=False)
    A = stepper.base[k]
    if diag is not None:
        A = A + sp.diags(diag, format="csc")
    return spla.splu(A.tocsc()).solve(rhs)


def _linear_step(stepper: _Stepper, k: int, b: np.ndarray) -> np.ndarray:
    A = stepper.base[k]
    u = _solve(stepper, k, None, b)
    res = np.max(np.abs(A @ u - b)) / max(1.0, np.max(np.abs(b)))
    if not res <= 1e-10:
        # one step of iterative refinement before giving up
        u = u + _solve(stepper, k, None, b - A @ u)
        res = np.max(np.abs(A @ u - b)) / max(1.0, np.max(np.abs(b)))
        if not res <= 1e-10:
            raise SolverError(f"linear solve did not reach tolerance (relative residual {res:.3g})")
    return u


def _newton_step(stepper, k, b, psi, beta: PenaltyFamily, guess, tol, max_iter):
    """Solve ``base u - b + beta(u - psi) = 0``; returns ``(u, iterations)``."""
    A = stepper.base[k]
    u = guess.copy()

    def F(v):
        return A @ v - b + beta(v - psi)

    Fu = F(u)
    scale = max(1.0, float(np.max(np.abs(u))))
    for it in range(1, max_iter + 1):
        delta = _solve(stepper, k, beta.derivative(u - psi), -Fu)
        step = float(np.max(np.abs(delta)))
        norm = float(np.max(np.abs(Fu)))
        alpha = 1.0
        for _ in range(31):
            trial = u + alpha * delta
            Ft = F(trial)
            if float(np.max(np.abs(Ft))) < norm or alpha * step <= tol * scale:
                break
            alpha *= 0.5
        else:
            raise NewtonError(
                f"line search exhausted at slice {k} (|F| = {norm:.3g}, eps = {beta.epsilon:g})"
            )
        u, Fu = trial, Ft
        if alpha * step <= tol * scale:
            return u, it
    raise NewtonError(f"Newton did not converge at slice {k} in {max_iter} iterations (eps = {beta.epsilon:g})")


def _march(stepper: _Stepper, u0, psi=None, beta=None, guess=None, tol=1e-10, max_iter=50):
    grid = stepper.grid
    out = np.empty((grid.t_count, grid.size))
    out[0] = u0
    iters = 0
    pen_max = 0.0
    for k in range(1, grid.t_count):
        b = stepper.rhs(out[k - 1], k)
        if psi is None:
            out[k] = _linear_step(stepper, k, b)
            continue
        start = out[k - 1] if guess is None else guess[k]
        out[k], n_it = _newton_step(stepper, k, b, psi[k], beta, start, tol, max_iter)
        iters += n_it
        pen_max = max(pen_max, float(np.max(beta(out[k] - psi[k]))))
    return out, iters, pen_max


def solve_linear(spec: ProblemSpec, grid: Grid, initial: Field, rhs: Optional[Callable] = None) -> np.ndarray:
    """Implicit march of ``u_tau + L u = f + I u_prev`` from ``initial``.

    Lateral values come from the terminal-cost growth extension.  ``rhs``
    defaults to the running cost and takes ``(x, t)`` in original time.
    Returns an array of shape ``(t_count,) + grid.shape``.
    """
    u0 = np.asarray(initial.values, dtype=float).ravel()
    if not np.all(np.isfinite(u0)):
        raise SolverError("initial data must be finite")
    stepper = _Stepper(spec, grid, rhs=rhs)
    out, _, _ = _march(stepper, u0)
    return out.reshape((grid.t_count,) + grid.shape)


# ---------------------------------------------------------------------------
# penalized QVI


def _obstacle(values, spec, grid, t_orig, search):
    """``M u`` and argmin shifts for every slice (slice 0 included)."""
    Mu = np.empty_like(values)
    xi = np.empty(values.shape + (grid.dim,))
    for k in range(len(values)):
        m, imap = apply_M(Field(grid, values[k].reshape(grid.shape)), spec, t_orig[k], search=search)
        Mu[k] = m.values.ravel()
        xi[k] = imap.xi.reshape(-1, grid.dim)
    return Mu, xi


def solve_penalized(spec: ProblemSpec, cfg: SolverConfig) -> Solution:
    """Outer obstacle fixed point around an epsilon-continued penalized march."""
    grid = cfg.grid
    if not np.isclose(grid.horizon, spec.horizon):
        raise SolverError(f"grid horizon {grid.horizon} differs from problem horizon {spec.horizon}")
    start = time.perf_counter()
    stepper = _Stepper(spec, grid, cfg)
    if not stepper.monotone:
        log.warning("discrete local operator is not monotone; convergence is not guaranteed")
    pts = grid.points()
    u0 = np.asarray(spec.g(pts), dtype=float)
    rate = jump_intensity(spec, grid, 0.0) if stepper.has_jumps else 0.0
    cfl = rate * grid.dt

    # m = 0: no obstacle
    u, _, _ = _march(stepper, u0)
    history = []
    newton_total = 0
    converged = False
    levels = []
    for m in range(1, cfg.obstacle_max_iter + 1):
        psi, _ = _obstacle(u, spec, grid, stepper.t_orig, cfg.search)
        guess = u
        levels = []
        for eps in cfg.epsilon_schedule:
            beta = PenaltyFamily(eps)
            guess, n_it, pen = _march(
                stepper, u0, psi, beta, guess, cfg.newton_tol, cfg.newton_max_iter
            )
            newton_total += n_it
            levels.append({"epsilon": eps, "penalty_max": pen, "newton_iterations": n_it})
        change = float(np.max(np.abs(guess - u)))
        u = guess
        history.append(change)
        log.info("outer iteration %d: change %.3e", m, change)
        if change < cfg.obstacle_tol:
            converged = True
            break
    if not converged:
        log.warning("obstacle iteration did not converge in %d iterations", cfg.obstacle_max_iter)

    Mu, xi = _obstacle(u, spec, grid, stepper.t_orig, cfg.search)
    shape = (grid.t_count,) + grid.shape
    sol = Solution(
        grid=grid,
        values=u.reshape(shape),
        Mu=Mu.reshape(shape),
        xi=xi.reshape(shape + (grid.dim,)),
        action=np.zeros(shape, dtype=bool),
    )
    sol.action = extract_regions(sol, cfg.region_tol)
    scale = max(1.0, float(np.max(np.abs(u))))
    sol.diagnostics = {
        "converged": converged,
        "outer_iterations": len(history),
        "outer_changes": history,
        "newton_iterations": newton_total,
        "penalty_levels": levels,
        "penalty_max": levels[-1]["penalty_max"] if levels else 0.0,
        "obstacle_gap": float(np.max(u - Mu)),
        "scale": scale,
        "monotone": stepper.monotone,
        "jump_cfl": cfl,
        "wall_time": time.perf_counter() - start,
    }
    if cfl > 1.0:
        log.warning("explicit jump term: rate*dt = %.3g exceeds 1", cfl)
    sol.diagnostics["qvi_residual"] = qvi_residual(sol, spec, cfg)
    return sol


def extract_regions(sol: Solution, region_tol: float) -> np.ndarray:
    """Action mask per slice: nodes with ``M u - u <= region_tol``."""
    return (sol.Mu - sol.values) <= region_tol


def qvi_residual(sol: Solution, spec: ProblemSpec, cfg: Optional[SolverConfig] = None) -> dict:
    """Residuals of both QVI branches on nodes at least 10% of the box away from the lateral boundary.

    ``d1 = -V_t + L V - f - I V`` (original time) and ``d2 = V - M V``;
    ``r1`` is taken over continuation nodes, ``r2`` over action nodes and
    ``comp`` over all of them.  Slice 0 (terminal data) is skipped.
    """
    grid = sol.grid
    stepper = _Stepper(spec, grid, cfg)
    interior = grid.interior_mask(0.1).ravel()
    action = sol.action.reshape(grid.t_count, -1)
    u = sol.values.reshape(grid.t_count, -1)
    Mu = sol.Mu.reshape(grid.t_count, -1)
    r1 = r2 = comp = 0.0
    for k in range(1, grid.t_count):
        d1 = (u[k] - u[k - 1]) / grid.dt + stepper.L[k](u[k]) - stepper.f[k] - stepper.jump(u[k], k)
        d2 = u[k] - Mu[k]
        a = action[k] & interior
        c = ~action[k] & interior
        if np.any(c):
            r1 = max(r1, float(np.max(np.abs(d1[c]))))
        if np.any(a):
            r2 = max(r2, float(np.max(np.abs(d2[a]))))
        if np.any(interior):
            comp = max(comp, float(np.max(np.minimum(np.abs(d1), np.abs(d2))[interior])))
    return {"r1_max": r1, "r2_max": r2, "comp_max": comp}
