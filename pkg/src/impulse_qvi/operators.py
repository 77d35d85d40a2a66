"""Discrete local (L), nonlocal (I) and intervention (M) operators.

Operators take time in the problem's original orientation.  Values beyond
the grid box follow the terminal-cost growth rule: ``u(p) = u(proj p) +
g(p) - g(proj p)``, which also supplies the ghost values of the boundary
stencils.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .grid import Field, Grid, ImpulseMap, interpolate
from .model import ProblemSpec

__all__ = [
    "OperatorError",
    "assemble_L",
    "apply_L",
    "apply_I",
    "apply_M",
    "radial_rule",
    "default_search_box",
]

log = logging.getLogger(__name__)


class OperatorError(ValueError):
    pass


# ---------------------------------------------------------------------------
# local operator


@dataclass
class LocalOperator:
    """``L u = matrix @ u + offset`` on the flattened grid."""

    matrix: sp.csr_matrix
    offset: np.ndarray
    monotone: bool

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return self.matrix @ u.ravel() + self.offset


def _extension(spec: ProblemSpec):
    return lambda p: spec.g(p)


def assemble_L(grid: Grid, spec: ProblemSpec, t: float) -> LocalOperator:
    """Assemble ``-tr(A D^2 u) - b.Du + r u`` with upwinded drift.

    Cross derivatives use the 7-point stencil whose diagonal follows the
    sign of ``a_ij``; the scheme is monotone when each ``a_ii/h_i^2``
    dominates ``sum_j |a_ij|/(h_i h_j)``.
    """
    if any(c < 3 for c in grid.counts):
        raise OperatorError("grid too coarse: need at least 3 nodes per axis")
    n = grid.dim
    h = grid.h
    pts = grid.points()
    N = grid.size
    A = spec.diffusion_matrix(pts, t).reshape(N, n, n)
    b = spec.drift_at(pts, t).reshape(N, n)
    stencil: dict = {}

    def add(offset, w):
        key = tuple(offset)
        stencil[key] = stencil.get(key, 0.0) + w

    zero = (0,) * n

    def unit(i, s):
        o = [0] * n
        o[i] = s
        return o

    add(zero, np.full(N, spec.discount))
    for i in range(n):
        a = A[:, i, i]
        add(zero, 2 * a / h[i] ** 2)
        add(unit(i, 1), -a / h[i] ** 2)
        add(unit(i, -1), -a / h[i] ** 2)
        bp = np.maximum(b[:, i], 0.0)
        bm = np.maximum(-b[:, i], 0.0)
        add(zero, (bp + bm) / h[i])
        add(unit(i, 1), -bp / h[i])
        add(unit(i, -1), -bm / h[i])
    monotone = True
    for i, j in itertools.combinations(range(n), 2):
        a = 0.5 * (A[:, i, j] + A[:, j, i])
        if not np.any(a):
            continue
        c = np.abs(a) / (h[i] * h[j])
        pos = a > 0
        pp = [0] * n
        pp[i], pp[j] = 1, 1
        mm = [0] * n
        mm[i], mm[j] = -1, -1
        pm = [0] * n
        pm[i], pm[j] = 1, -1
        mp = [0] * n
        mp[i], mp[j] = -1, 1
        add(zero, -2 * c)
        add(pp, np.where(pos, -c, 0.0))
        add(mm, np.where(pos, -c, 0.0))
        add(pm, np.where(pos, 0.0, -c))
        add(mp, np.where(pos, 0.0, -c))
        for o in (unit(i, 1), unit(i, -1), unit(j, 1), unit(j, -1)):
            add(o, c)
    # monotone iff all off-diagonal weights are nonpositive
    for key, w in stencil.items():
        if key != zero and np.any(np.asarray(w) > 1e-14):
            monotone = False
    if not monotone:
        log.warning("local operator is not monotone on this grid (cross terms dominate)")

    idx = grid.index_array()
    counts = np.asarray(grid.counts)
    lo = np.asarray(grid.lo)
    flat = np.arange(N)
    rows, cols, vals = [], [], []
    offset = np.zeros(N)
    for key, w in stencil.items():
        w = np.broadcast_to(np.asarray(w, dtype=float), (N,))
        nb = idx + np.asarray(key)
        clipped = np.clip(nb, 0, counts - 1)
        target = np.ravel_multi_index(tuple(clipped.T), grid.shape)
        rows.append(flat)
        cols.append(target)
        vals.append(w)
        ghost = np.any(nb != clipped, axis=1) & (w != 0)
        if np.any(ghost):
            p_out = pts[ghost] + np.asarray(key) * h
            p_in = lo + clipped[ghost] * h
            offset[ghost] += w[ghost] * (spec.g(p_out) - spec.g(p_in))
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
    )
    mat.sum_duplicates()
    return LocalOperator(mat, offset, monotone)


def apply_L(u: Field, spec: ProblemSpec, t: float) -> Field:
    op = assemble_L(u.grid, spec, t)
    return Field(u.grid, op(u.values).reshape(u.grid.shape))


# ---------------------------------------------------------------------------
# nonlocal operator


def radial_rule(a: float, b: float, n_nodes: int = 64, panels: int = 16):
    """Composite Gauss-Legendre nodes/weights on ``(a, b)``.

    Panels are geometrically graded towards ``a`` so integrable
    singularities of the radial density at 0 are resolved.
    """
    if b <= a:
        return np.zeros(0), np.zeros(0)
    per = max(2, n_nodes // panels)
    gx, gw = np.polynomial.legendre.leggauss(per)
    if a == 0.0:
        edges = b * 2.0 ** -np.arange(panels - 1, -1, -1.0)
        edges = np.concatenate([[0.0], edges])
    else:
        edges = np.geomspace(a, b, panels + 1)
    nodes, weights = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        nodes.append(0.5 * (hi - lo) * gx + 0.5 * (hi + lo))
        weights.append(0.5 * (hi - lo) * gw)
    return np.concatenate(nodes), np.concatenate(weights)


def _gradient(values: np.ndarray, grid: Grid) -> np.ndarray:
    """Central differences (second-order one-sided at the edges); shape ``grid.shape + (n,)``."""
    grads = np.gradient(values, *grid.h, edge_order=2) if grid.dim > 1 else [
        np.gradient(values, grid.h[0], edge_order=2)
    ]
    return np.stack(grads, axis=-1)


def _ext_margin(grid: Grid) -> float:
    return float(np.max(np.asarray(grid.hi) - np.asarray(grid.lo)))


def apply_I(
    u: Field,
    spec: ProblemSpec,
    t: float,
    theta: float = 0.0,
    gradient_source: Optional[Field] = None,
    quad_nodes: int = 64,
    margin: Optional[float] = None,
) -> Field:
    """Nonlocal jump operator split at radius ``theta``.

    Jumps with ``|z| < theta`` act on ``gradient_source`` (phi), the others
    on ``u``; all compensators use ``D phi``.  With ``gradient_source=None``
    phi is ``u`` and the result is ``I u`` for any ``theta``.
    """
    if theta < 0:
        raise OperatorError("theta must be >= 0")
    grid = u.grid
    phi = u if gradient_source is None else gradient_source
    out = _jump_integral(u.values, phi.values, grid, spec, t, None, theta, quad_nodes, margin)
    return Field(grid, out.reshape(grid.shape))


def _jump_integral(u, phi, grid, spec, t, pts, theta, quad_nodes=64, margin=None, dphi=None, inner=True):
    """``I^1_theta[phi] + I^2_theta[u]`` at ``pts`` (grid nodes when None).

    ``inner=False`` drops the ``|z| < theta`` part; ``dphi`` overrides the
    gradient used by the compensators.
    """
    on_nodes = pts is None
    if on_nodes:
        pts = grid.points()
    N = len(pts)
    total = np.zeros(N)
    jumps = spec.jumps
    if jumps.empty:
        return total
    g = _extension(spec)
    margin = _ext_margin(grid) if margin is None else margin
    if dphi is None:
        dphi = _gradient(phi, grid).reshape(-1, grid.dim)
        if not on_nodes:
            dphi = np.stack([interpolate(dphi[:, i].reshape(grid.shape), grid, pts) for i in range(grid.dim)], -1)
    dphi = np.asarray(dphi, dtype=float).reshape(N, grid.dim)
    phi_x = phi.ravel() if on_nodes else interpolate(phi, grid, pts, g)
    u_x = u.ravel() if on_nodes else interpolate(u, grid, pts, g)
    lo, hi = np.asarray(grid.lo), np.asarray(grid.hi)

    def check(dest):
        far = np.maximum(lo - dest, 0.0) + np.maximum(dest - hi, 0.0)
        if np.any(far > margin + 1e-12):
            raise OperatorError(
                f"jump destination {float(np.max(far)):.3g} beyond the box exceeds extension margin {margin:.3g}"
            )

    for lam, z in spec.atoms_at(pts, t):
        r = np.linalg.norm(z, axis=-1)
        dest = pts + z
        check(dest)
        small = r < theta
        if not inner:
            lam = np.where(small, 0.0, lam)
        val = np.where(small, interpolate(phi, grid, dest, g) - phi_x, interpolate(u, grid, dest, g) - u_x)
        comp = np.where(r < 1.0, np.einsum("ij,ij->i", dphi, z), 0.0)
        total += lam * (val - comp)

    sm = jumps.small
    if sm is not None:
        cut = sm.cutoff
        split = min(theta, cut)
        parts = [(u, u_x, split, cut)]
        if inner:
            parts.insert(0, (phi, phi_x, 0.0, split))
        for field_vals, base, a, b in parts:
            s_q, w_q = radial_rule(a, b, quad_nodes)
            if len(s_q) == 0:
                continue
            w_q = w_q * sm.rho(s_q)
            for d, wd in zip(sm.directions, sm.weights):
                z = s_q[:, None] * d[None, :]  # (Q, n)
                dest = pts[:, None, :] + z[None, :, :]
                check(dest.reshape(-1, grid.dim))
                vals = interpolate(field_vals, grid, dest, g)  # (N, Q)
                integrand = vals - base[:, None] - s_q[None, :] * (dphi @ d)[:, None]
                total += wd * integrand @ w_q
    return total


def jump_intensity(spec: ProblemSpec, grid: Grid, t: float) -> float:
    """Largest total jump rate seen by a node, counting small jumps down to one grid spacing."""
    pts = grid.points()
    rate = np.zeros(len(pts))
    for lam, _ in spec.atoms_at(pts, t):
        rate += lam
    sm = spec.jumps.small
    total = float(np.max(rate)) if len(rate) else 0.0
    if sm is not None:
        total += sm.moment(0.0, lo=float(np.min(grid.h)))
    return total


# ---------------------------------------------------------------------------
# intervention operator


def default_search_box(u: np.ndarray, grid: Grid, spec: ProblemSpec, t: float) -> np.ndarray:
    """Impulse search box ``[-R_i, R_i]`` per axis.

    An optimal impulse satisfies ``L + c|xi|^mu <= B(xi) <= osc(u) + B(small shift)``,
    giving ``R = ((osc u + B_small - L) / c)^(1/mu)`` when the growth
    constant ``c`` is declared; otherwise the whole box is searched.
    """
    width = np.asarray(grid.hi) - np.asarray(grid.lo)
    c = spec.constants
    if c.B_growth > 0:
        shifts = np.diag(grid.h)
        b_small = float(np.max(spec.B(shifts, np.full(grid.dim, t))))
        osc = float(np.max(u) - np.min(u))
        radius = max((osc + b_small - c.L_bound) / c.B_growth, 0.0) ** (1.0 / c.mu)
        radius = np.minimum(width, max(radius, float(np.max(grid.h))))
    else:
        radius = width
    return np.stack([-radius, radius], axis=-1)


def _shift_offsets(grid: Grid, search: np.ndarray) -> np.ndarray:
    h = grid.h
    ranges = []
    for i in range(grid.dim):
        k_lo = int(np.ceil(search[i, 0] / h[i] - 1e-9))
        k_hi = int(np.floor(search[i, 1] / h[i] + 1e-9))
        ranges.append(np.arange(k_lo, k_hi + 1))
    offs = np.stack([m.ravel() for m in np.meshgrid(*ranges, indexing="ij")], -1)
    offs = offs[np.any(offs != 0, axis=1)]
    xi = offs * h
    # smallest |xi| first, then lexicographic: first strict minimum wins ties
    order = np.lexsort(tuple(xi[:, k] for k in range(grid.dim - 1, -1, -1)) + (np.linalg.norm(xi, axis=1),))
    return offs[order]


_CHUNK = 1 << 21


def apply_M(
    u: Field,
    spec: ProblemSpec,
    t: float,
    search: Optional[np.ndarray] = None,
    refine: bool = True,
):
    """Intervention operator ``Mu(x) = min_{xi != 0} u(x + xi) + B(xi, t)``.

    A coarse pass scans grid-aligned shifts in ``search`` (per-axis
    ``[lo, hi]`` bounds on xi, clipped so ``x + xi`` stays on the grid); a
    golden-section pass along each axis then refines within one spacing
    using multilinear interpolation.  Returns ``(Mu, ImpulseMap)``.
    """
    grid = u.grid
    n = grid.dim
    vals = u.values
    if search is None:
        search = default_search_box(vals, grid, spec, t)
    search = np.asarray(search, dtype=float).reshape(n, 2)
    offs = _shift_offsets(grid, search)
    if len(offs) == 0:
        raise OperatorError("empty impulse search set")
    h = grid.h
    idx = grid.index_array()
    counts = np.asarray(grid.counts)
    N = grid.size
    flat = vals.ravel()
    best = np.full(N, np.inf)
    arg = np.zeros((N, n), dtype=np.int64)
    costs = spec.B(offs * h, np.full(len(offs), t))
    chunk = max(1, _CHUNK // N)
    for start in range(0, len(offs), chunk):
        o = offs[start:start + chunk]
        dest = idx[:, None, :] + o[None, :, :]
        ok = np.all((dest >= 0) & (dest < counts), axis=-1)
        lin = np.ravel_multi_index(tuple(np.moveaxis(np.clip(dest, 0, counts - 1), -1, 0)), grid.shape)
        cand = np.where(ok, flat[lin] + costs[None, start:start + chunk], np.inf)
        # argmin keeps the first minimum: shifts are pre-sorted for tie-breaking
        j = np.argmin(cand, axis=1)
        val = cand[np.arange(N), j]
        better = val < best
        best[better] = val[better]
        arg[better] = o[j[better]]
    if not np.all(np.isfinite(best)):
        bad = int(np.flatnonzero(~np.isfinite(best))[0])
        raise OperatorError(f"no feasible impulse at node {idx[bad].tolist()}")
    pts = grid.points()
    xi = arg * h
    if refine:
        xi, best = _refine(vals, grid, spec, t, pts, xi, best, search)
    else:
        best = interpolate(vals, grid, pts + xi) + spec.B(xi, np.full(N, t))
    mu = Field(grid, best.reshape(grid.shape))
    imap = ImpulseMap(grid, xi.reshape(grid.shape + (n,)), np.ones(grid.shape, dtype=bool))
    return mu, imap


def _refine(vals, grid, spec, t, pts, xi, best, search):
    n = grid.dim
    h = grid.h
    lo, hi = np.asarray(grid.lo), np.asarray(grid.hi)
    tt = np.full(len(pts), t)
    h_min = float(np.min(h)) * (1 - 1e-12)

    def objective(x_try):
        return interpolate(vals, grid, pts + x_try) + spec.B(x_try, tt)

    cur = objective(xi)
    for i in range(n):
        a = np.maximum(xi[:, i] - h[i], np.maximum(search[i, 0], lo[i] - pts[:, i]))
        b = np.minimum(xi[:, i] + h[i], np.minimum(search[i, 1], hi[i] - pts[:, i]))

        def along(s, i=i):
            x_try = xi.copy()
            x_try[:, i] = s
            return objective(x_try)

        s_opt = golden_section(along, a, b)
        trial = xi.copy()
        trial[:, i] = s_opt
        val = objective(trial)
        # refinement stays at or above grid resolution so xi cannot collapse to 0
        keep = (val < cur) & (np.linalg.norm(trial, axis=1) >= h_min)
        xi = np.where(keep[:, None], trial, xi)
        cur = np.where(keep, val, cur)
    return xi, cur


def golden_section(fn, a, b, iters: int = 48):
    """Vectorised golden-section search for a minimiser of ``fn`` on ``[a, b]``."""
    a = np.asarray(a, dtype=float).copy()
    b = np.asarray(b, dtype=float).copy()
    r = 0.5 * (np.sqrt(5.0) - 1.0)
    c = b - r * (b - a)
    d = a + r * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(iters):
        left = fc < fd
        # left: new bracket [a, d], old c becomes d
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = np.where(left, b - r * (b - a), d)
        new_d = np.where(left, c, a + r * (b - a))
        probe = np.where(left, new_c, new_d)
        fp = fn(probe)
        fc, fd = np.where(left, fp, fd), np.where(left, fc, fp)
        c, d = new_c, new_d
    return 0.5 * (a + b)
