"""Impulse-control problem instances: data model, JSON parsing and checks.

A problem is described by a JSON document with keys ``dim``, ``horizon``,
``discount``, ``drift``, ``diffusion``, ``jumps``, ``running_cost``,
``terminal_cost``, ``intervention_cost`` and ``constants``.  See
``docs/problem_schema.md`` for the full schema.

Costs are discounted at rate ``discount`` from the decision time: running
cost by ``exp(-r (s - t0))``, intervention cost by ``exp(-r (tau_i - t0))``
and terminal cost by ``exp(-r (T - t0))``.  With ``discount = 0`` the cost
functional is undiscounted.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate

from .expr import Expression, ExpressionError, compile_expression

__all__ = [
    "ProblemError",
    "AssumptionViolation",
    "CoefficientFn",
    "JumpAtom",
    "SmallJumps",
    "JumpSpec",
    "Constants",
    "ProblemSpec",
    "CoeffBundle",
    "AssumptionEntry",
    "AssumptionReport",
    "parse_problem",
    "load_problem",
    "render_problem",
    "eval_coeffs",
    "validate_assumptions",
]


class ProblemError(ValueError):
    """Malformed or inconsistent problem configuration."""


class AssumptionViolation(ProblemError):
    """The declared constants contradict a structural assumption."""


# ---------------------------------------------------------------------------
# coefficient functions


@dataclass(frozen=True)
class CoefficientFn:
    """A scalar coefficient: an expression or a named builtin.

    Builtins act on the coefficient's primary vector argument, which is the
    state ``x`` for everything except the intervention cost, where it is the
    impulse ``xi``.
    """

    kind: str
    params: dict = field(compare=False)
    vector: str = "x"
    expr: Optional[Expression] = field(default=None, compare=False, repr=False)

    @property
    def time_dependent(self) -> bool:
        if self.kind == "expr":
            return self.expr.uses("t")
        if self.kind == "affine":
            return self.params.get("time", 0.0) != 0.0
        return False

    def __call__(self, x=None, t=None, xi=None, s=None):
        v = xi if self.vector == "xi" else x
        if self.kind == "expr":
            out = self.expr(x=x, t=t, xi=xi, s=s)
        elif self.kind == "constant":
            out = self.params["value"]
        else:
            v = np.asarray(v, dtype=float)
            p = self.params
            if self.kind == "affine":
                out = p["const"] + v @ np.asarray(p["linear"], dtype=float)
                if p.get("time", 0.0):
                    out = out + p["time"] * np.asarray(t, dtype=float)
            elif self.kind == "quadratic":
                q = np.asarray(p["matrix"], dtype=float)
                out = p["const"] + v @ np.asarray(p["linear"], dtype=float)
                out = out + np.einsum("...i,ij,...j->...", v, q, v)
            elif self.kind == "table":
                out = np.interp(v[..., p["axis"]], p["knots"], p["values"])
            else:  # pragma: no cover - guarded by parser
                raise AssertionError(self.kind)
        return _broadcast(out, x, t, xi, s, self.vector)

    def render(self):
        if self.kind == "expr":
            return self.expr.source
        if self.kind == "constant":
            return self.params["value"]
        return {"type": self.kind, **self.params}


def _broadcast(out, x, t, xi, s, vector):
    """Give a coefficient value the batch shape of its arguments."""
    shape: tuple = ()
    v = xi if vector == "xi" else x
    if v is not None:
        shape = np.shape(v)[:-1]
    for extra in (t, s):
        if extra is not None and np.ndim(extra) > 0:
            shape = np.broadcast_shapes(shape, np.shape(extra))
    return np.broadcast_to(np.asarray(out, dtype=float), shape).astype(float, copy=False)


_ALLOWED = {
    "drift": {"x", "t"},
    "diffusion": {"x", "t"},
    "running_cost": {"x", "t"},
    "terminal_cost": {"x"},
    "intervention_cost": {"xi", "t"},
    "intensity": {"x", "t"},
    "size": {"x", "t"},
    "density": {"s"},
}


def _coef(raw, where: str, context: str, dim: int) -> CoefficientFn:
    vector = "xi" if context == "intervention_cost" else "x"
    if isinstance(raw, bool):
        raise ProblemError(f"{where}: expected expression or number, got boolean")
    if isinstance(raw, (int, float)):
        return CoefficientFn("constant", {"value": float(raw)}, vector)
    if isinstance(raw, str):
        try:
            ex = compile_expression(raw, allowed=_ALLOWED[context])
        except ExpressionError as err:
            raise ProblemError(f"{where}: {err}") from None
        for name, top in ex.indices.items():
            if top >= dim:
                raise ProblemError(
                    f"{where}: dimension mismatch, {name}[{top}] used but dim is {dim}"
                )
        return CoefficientFn("expr", {}, vector, ex)
    if isinstance(raw, dict):
        kind = raw.get("type")
        params = {k: v for k, v in raw.items() if k != "type"}
        try:
            if kind == "constant":
                params = {"value": float(params["value"])}
            elif kind in ("affine", "quadratic"):
                lin = [float(a) for a in params.get("linear", [0.0] * dim)]
                if len(lin) != dim:
                    raise ProblemError(f"{where}: dimension mismatch, linear has {len(lin)} entries")
                out = {"const": float(params.get("const", 0.0)), "linear": lin}
                if kind == "affine":
                    out["time"] = float(params.get("time", 0.0))
                else:
                    mat = [[float(a) for a in row] for row in params.get("matrix", [])]
                    if len(mat) != dim or any(len(row) != dim for row in mat):
                        raise ProblemError(f"{where}: dimension mismatch, matrix must be {dim}x{dim}")
                    out["matrix"] = mat
                params = out
            elif kind == "table":
                knots = [float(a) for a in params["knots"]]
                values = [float(a) for a in params["values"]]
                axis = int(params.get("axis", 0))
                if len(knots) != len(values) or len(knots) < 2:
                    raise ProblemError(f"{where}: table needs matching knots/values (>= 2)")
                if np.any(np.diff(knots) <= 0):
                    raise ProblemError(f"{where}: table knots must be increasing")
                if not 0 <= axis < dim:
                    raise ProblemError(f"{where}: dimension mismatch, axis {axis} with dim {dim}")
                params = {"axis": axis, "knots": knots, "values": values}
            else:
                raise ProblemError(f"{where}: unknown builtin type {kind!r}")
        except (KeyError, TypeError, ValueError) as err:
            if isinstance(err, ProblemError):
                raise
            raise ProblemError(f"{where}: bad builtin parameters ({err})") from None
        if context == "density":
            raise ProblemError(f"{where}: radial density must be an expression in s or a number")
        return CoefficientFn(kind, params, vector)
    raise ProblemError(f"{where}: expected expression, number or builtin object")


# ---------------------------------------------------------------------------
# jump description


@dataclass(frozen=True)
class JumpAtom:
    intensity: CoefficientFn
    size: tuple


@dataclass(frozen=True)
class SmallJumps:
    """Compensated small jumps ``z = s * d`` with radial density ``rho(s)`` on
    ``(0, cutoff)`` and direction ``d`` drawn from ``directions`` with
    probabilities ``weights``."""

    density: CoefficientFn
    cutoff: float
    directions: np.ndarray = field(compare=False)
    weights: np.ndarray = field(compare=False)

    def rho(self, s):
        return self.density(s=np.asarray(s, dtype=float))

    def moment(self, power: float, lo: float = 0.0, hi: Optional[float] = None) -> float:
        """``int_lo^hi s^power rho(s) ds`` by adaptive quadrature."""
        hi = self.cutoff if hi is None else min(hi, self.cutoff)
        if hi <= lo:
            return 0.0
        val, _ = integrate.quad(lambda s: s**power * float(self.rho(s)), lo, hi, limit=200)
        return float(val)


@dataclass(frozen=True)
class JumpSpec:
    atoms: tuple = ()
    small: Optional[SmallJumps] = None
    order_delta_bound: float = float("inf")

    @property
    def empty(self) -> bool:
        return not self.atoms and self.small is None


@dataclass(frozen=True)
class Constants:
    gamma: float
    delta: float
    mu: float
    nu: float
    K: float
    L_bound: float
    B_growth: float = 0.0


@dataclass(frozen=True)
class ProblemSpec:
    dim: int
    horizon: float
    discount: float
    drift: tuple
    diffusion: tuple
    jumps: JumpSpec
    running_cost: CoefficientFn
    terminal_cost: CoefficientFn
    intervention_cost: CoefficientFn
    constants: Constants

    @property
    def noise_dim(self) -> int:
        return len(self.diffusion[0])

    @property
    def time_dependent(self) -> bool:
        fns = list(self.drift) + [c for row in self.diffusion for c in row]
        for atom in self.jumps.atoms:
            fns += [atom.intensity, *atom.size]
        return any(fn.time_dependent for fn in fns)

    def drift_at(self, x, t):
        return np.stack([fn(x=x, t=t) for fn in self.drift], axis=-1)

    def sigma_at(self, x, t):
        rows = [np.stack([fn(x=x, t=t) for fn in row], axis=-1) for row in self.diffusion]
        return np.stack(rows, axis=-2)

    def diffusion_matrix(self, x, t):
        """``A = sigma sigma^T / 2`` with shape ``batch + (n, n)``."""
        sig = self.sigma_at(x, t)
        return 0.5 * np.einsum("...ik,...jk->...ij", sig, sig)

    def atoms_at(self, x, t):
        """List of ``(intensity, size)`` arrays, sizes with shape ``batch + (n,)``."""
        out = []
        for atom in self.jumps.atoms:
            lam = atom.intensity(x=x, t=t)
            z = np.stack([fn(x=x, t=t) for fn in atom.size], axis=-1)
            out.append((lam, z))
        return out

    def f(self, x, t):
        return self.running_cost(x=x, t=t)

    def g(self, x):
        return self.terminal_cost(x=x)

    def B(self, xi, t):
        return self.intervention_cost(xi=xi, t=t)


# ---------------------------------------------------------------------------
# parsing / rendering


def _require(doc: dict, key: str):
    if key not in doc:
        raise ProblemError(f"missing required key {key!r}")
    return doc[key]


def _vector(raw, where, context, dim):
    if isinstance(raw, (str, int, float, dict)) and not isinstance(raw, bool):
        if dim != 1:
            raise ProblemError(f"{where}: dimension mismatch, scalar given for dim {dim}")
        raw = [raw]
    if not isinstance(raw, list) or len(raw) != dim:
        n = len(raw) if isinstance(raw, list) else "?"
        raise ProblemError(f"{where}: dimension mismatch, expected {dim} entries, got {n}")
    return tuple(_coef(r, f"{where}[{i}]", context, dim) for i, r in enumerate(raw))


def _matrix(raw, where, dim):
    if isinstance(raw, (str, int, float)) and not isinstance(raw, bool):
        if dim != 1:
            raise ProblemError(f"{where}: dimension mismatch, scalar given for dim {dim}")
        raw = [[raw]]
    if not isinstance(raw, list) or len(raw) != dim:
        raise ProblemError(f"{where}: dimension mismatch, expected {dim} rows")
    if all(not isinstance(r, list) for r in raw):
        # diagonal shorthand
        zero = 0.0
        raw = [[raw[i] if i == j else zero for j in range(dim)] for i in range(dim)]
    width = {len(r) if isinstance(r, list) else -1 for r in raw}
    if len(width) != 1 or min(width) < 1:
        raise ProblemError(f"{where}: diffusion rows must be lists of equal length")
    return tuple(
        tuple(_coef(c, f"{where}[{i}][{j}]", "diffusion", dim) for j, c in enumerate(row))
        for i, row in enumerate(raw)
    )


def _jumps(raw, dim) -> JumpSpec:
    if raw is None:
        return JumpSpec()
    if not isinstance(raw, dict):
        raise ProblemError("jumps: expected an object")
    atoms = []
    for k, a in enumerate(raw.get("atoms", [])):
        where = f"jumps.atoms[{k}]"
        inten = _coef(_require_in(a, "intensity", where), f"{where}.intensity", "intensity", dim)
        size = _vector(_require_in(a, "size", where), f"{where}.size", "size", dim)
        if inten.kind == "constant" and inten.params["value"] < 0:
            raise ProblemError(f"{where}.intensity: must be nonnegative")
        atoms.append(JumpAtom(inten, size))
    small = None
    sd = raw.get("small_density")
    if sd is not None:
        where = "jumps.small_density"
        dens = _coef(_require_in(sd, "density", where), f"{where}.density", "density", dim)
        cutoff = float(_require_in(sd, "cutoff", where))
        if not 0.0 < cutoff <= 1.0:
            raise ProblemError(f"{where}.cutoff: must lie in (0, 1]")
        if "directions" in sd:
            dirs = np.asarray(sd["directions"], dtype=float)
            if dirs.ndim != 2 or dirs.shape[1] != dim:
                raise ProblemError(f"{where}.directions: dimension mismatch, need rows of length {dim}")
            norms = np.linalg.norm(dirs, axis=1)
            if np.any(norms == 0):
                raise ProblemError(f"{where}.directions: zero direction")
            dirs = dirs / norms[:, None]
        else:
            dirs = np.concatenate([np.eye(dim), -np.eye(dim)])
        if "weights" in sd:
            w = np.asarray(sd["weights"], dtype=float)
            if w.shape != (len(dirs),) or np.any(w < 0) or w.sum() <= 0:
                raise ProblemError(f"{where}.weights: need one nonnegative weight per direction")
            w = w / w.sum()
        else:
            w = np.full(len(dirs), 1.0 / len(dirs))
        small = SmallJumps(dens, cutoff, dirs, w)
    bound = float(raw.get("order_delta_bound", float("inf")))
    return JumpSpec(tuple(atoms), small, bound)


def _require_in(d, key, where):
    if not isinstance(d, dict) or key not in d:
        raise ProblemError(f"{where}: missing key {key!r}")
    return d[key]


def _constants(raw) -> Constants:
    if not isinstance(raw, dict):
        raise ProblemError("constants: expected an object")
    try:
        c = Constants(
            gamma=float(raw["gamma"]),
            delta=float(raw["delta"]),
            mu=float(raw["mu"]),
            nu=float(raw.get("nu", 0.0)),
            K=float(raw.get("K", 0.0)),
            L_bound=float(raw.get("L_bound", 0.0)),
            B_growth=float(raw.get("B_growth", 0.0)),
        )
    except KeyError as err:
        raise ProblemError(f"constants: missing key {err.args[0]!r}") from None
    if c.gamma < 0:
        raise ProblemError("constants.gamma: must be >= 0")
    if not 0 < c.delta <= 1:
        raise ProblemError("constants.delta: must lie in (0, 1]")
    if not 0 < c.mu <= 1:
        raise ProblemError("constants.mu: must lie in (0, 1]")
    if not 0 <= c.nu < 1:
        raise ProblemError("constants.nu: must lie in [0, 1)")
    return c


def parse_problem(text: str, strict: bool = True) -> ProblemSpec:
    """Build a :class:`ProblemSpec` from a JSON document.

    With ``strict`` the declared dominance relation ``gamma + delta < mu``,
    ``nu <= mu`` is enforced and :class:`AssumptionViolation` is raised when
    it fails.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise ProblemError(f"syntax error at line {err.lineno} column {err.colno}: {err.msg}") from None
    if not isinstance(doc, dict):
        raise ProblemError("problem document must be a JSON object")
    dim = _require(doc, "dim")
    if not isinstance(dim, int) or isinstance(dim, bool) or dim < 1:
        raise ProblemError("dim: must be a positive integer")
    horizon = float(_require(doc, "horizon"))
    if not horizon > 0:
        raise ProblemError("horizon: must be > 0")
    discount = float(doc.get("discount", 0.0))
    if discount < 0:
        raise ProblemError("discount: must be >= 0")
    spec = ProblemSpec(
        dim=dim,
        horizon=horizon,
        discount=discount,
        drift=_vector(_require(doc, "drift"), "drift", "drift", dim),
        diffusion=_matrix(_require(doc, "diffusion"), "diffusion", dim),
        jumps=_jumps(doc.get("jumps"), dim),
        running_cost=_coef(_require(doc, "running_cost"), "running_cost", "running_cost", dim),
        terminal_cost=_coef(_require(doc, "terminal_cost"), "terminal_cost", "terminal_cost", dim),
        intervention_cost=_coef(
            _require(doc, "intervention_cost"), "intervention_cost", "intervention_cost", dim
        ),
        constants=_constants(_require(doc, "constants")),
    )
    if strict:
        c = spec.constants
        if c.gamma + c.delta >= c.mu:
            raise AssumptionViolation(
                f"dominance violated: γ+δ ≥ μ ({c.gamma:g}+{c.delta:g} ≥ {c.mu:g})"
            )
        if c.nu > c.mu:
            raise AssumptionViolation(f"dominance violated: ν > μ ({c.nu:g} > {c.mu:g})")
    return spec


def load_problem(path, strict: bool = True) -> ProblemSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_problem(fh.read(), strict=strict)


def problem_to_dict(spec: ProblemSpec) -> dict:
    doc = {
        "dim": spec.dim,
        "horizon": spec.horizon,
        "discount": spec.discount,
        "drift": [fn.render() for fn in spec.drift],
        "diffusion": [[fn.render() for fn in row] for row in spec.diffusion],
        "running_cost": spec.running_cost.render(),
        "terminal_cost": spec.terminal_cost.render(),
        "intervention_cost": spec.intervention_cost.render(),
        "constants": {
            "gamma": spec.constants.gamma,
            "delta": spec.constants.delta,
            "mu": spec.constants.mu,
            "nu": spec.constants.nu,
            "K": spec.constants.K,
            "L_bound": spec.constants.L_bound,
            "B_growth": spec.constants.B_growth,
        },
    }
    jumps: dict = {}
    if spec.jumps.atoms:
        jumps["atoms"] = [
            {"intensity": a.intensity.render(), "size": [fn.render() for fn in a.size]}
            for a in spec.jumps.atoms
        ]
    sm = spec.jumps.small
    if sm is not None:
        jumps["small_density"] = {
            "density": sm.density.render(),
            "cutoff": sm.cutoff,
            "directions": sm.directions.tolist(),
            "weights": sm.weights.tolist(),
        }
    if np.isfinite(spec.jumps.order_delta_bound):
        jumps["order_delta_bound"] = spec.jumps.order_delta_bound
    if jumps:
        doc["jumps"] = jumps
    return doc


def render_problem(spec: ProblemSpec) -> str:
    return json.dumps(problem_to_dict(spec), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# pointwise evaluation


@dataclass(frozen=True)
class CoeffBundle:
    b: np.ndarray
    A: np.ndarray
    f: float
    jump_atoms: list


def eval_coeffs(spec: ProblemSpec, x, t) -> CoeffBundle:
    x = np.asarray(x, dtype=float).reshape(spec.dim)
    b = spec.drift_at(x, t)
    A = spec.diffusion_matrix(x, t)
    f = float(spec.f(x, t))
    atoms = [(float(lam), z) for lam, z in spec.atoms_at(x, t)]
    vals = [b.ravel(), A.ravel(), [f]] + [np.r_[lam, z] for lam, z in atoms]
    if not all(np.all(np.isfinite(v)) for v in vals):
        raise ProblemError(f"non-finite coefficient value at x={x.tolist()}, t={t}")
    return CoeffBundle(b=b, A=A, f=f, jump_atoms=atoms)


# ---------------------------------------------------------------------------
# sampled assumption checks


@dataclass
class AssumptionEntry:
    id: int
    name: str
    status: str  # pass | fail | skipped
    margin: float = float("nan")
    worst_point: Optional[dict] = None
    estimates: dict = field(default_factory=dict)
    note: str = "sampled, not proven"

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "status": self.status,
            "margin": _jsonable(self.margin),
            "worst_point": _jsonable(self.worst_point),
            "estimates": _jsonable(self.estimates),
            "note": self.note,
        }


@dataclass
class AssumptionReport:
    entries: list

    def __getitem__(self, ident: int) -> AssumptionEntry:
        for e in self.entries:
            if e.id == ident:
                return e
        raise KeyError(ident)

    @property
    def ok(self) -> bool:
        return all(e.status != "fail" for e in self.entries)

    def to_dict(self) -> dict:
        return {"ok": self.ok, "entries": [e.to_dict() for e in self.entries]}


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if np.isfinite(v) else str(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


# Separations (as fractions of the box diagonal) used to probe whether a
# difference quotient blows up under refinement.
_SCALES = (1e-1, 1e-2, 1e-3, 1e-4)
_BLOWUP = 1.5


def _quotients(fn, x, t, seps, dirs, exponent, weight=None):
    """Max difference quotient ``|fn(x) - fn(x+d)| / (w |d|^exponent)`` per scale."""
    per_scale = []
    worst = (-np.inf, None)
    base = fn(x, t)
    for sep in seps:
        y = x + sep * dirs
        num = np.abs(base - fn(y, t))
        if num.ndim > 1:
            num = np.linalg.norm(num.reshape(len(x), -1), axis=1)
        q = num / (sep**exponent)
        if weight is not None:
            q = q / weight(x, y)
        if not np.all(np.isfinite(q)):
            bad = int(np.flatnonzero(~np.isfinite(q))[0])
            raise ProblemError(f"coefficient evaluation failed near x={x[bad].tolist()}")
        k = int(np.argmax(q))
        per_scale.append(float(q[k]))
        if q[k] > worst[0]:
            worst = (float(q[k]), {"x": x[k].tolist(), "y": y[k].tolist(), "t": float(np.ravel(t)[k] if np.ndim(t) else t)})
    return per_scale, worst


def _growth_ratio(per_scale):
    """Smallest consecutive-scale growth factor of the quotient (>1.5 twice => blowup)."""
    r = [per_scale[i + 1] / max(per_scale[i], 1e-300) for i in range(len(per_scale) - 1)]
    return min(r[-2:])


def _multiscale_entry(ident, name, fns, x, t, diag, dirs, exponent, weight=None):
    estimates = {}
    margin = np.inf
    worst_pt = None
    failed = False
    for label, fn in fns.items():
        per_scale, worst = _quotients(fn, x, t, [s * diag for s in _SCALES], dirs, exponent, weight)
        growth = _growth_ratio(per_scale)
        estimates[label] = worst[0]
        m = _BLOWUP - growth
        if m < margin:
            margin, worst_pt = m, worst[1]
        if growth > _BLOWUP and per_scale[-1] > 1e-9:
            failed = True
    return AssumptionEntry(ident, name, "fail" if failed else "pass", float(margin), worst_pt, estimates)


def _box_arrays(box, dim):
    box = np.asarray(box, dtype=float)
    if box.shape == (2,) and dim == 1:
        box = box[None, :]
    if box.shape != (dim, 2):
        raise ProblemError(f"box must have shape ({dim}, 2)")
    lo, hi = box[:, 0], box[:, 1]
    if np.any(hi <= lo):
        raise ProblemError("box must be nonempty")
    return lo, hi


# sampled inequalities that hold with equality are not failed on rounding error
_ROUNDOFF = 1e-9


def validate_assumptions(spec: ProblemSpec, box, samples: int = 2000, seed: int = 0) -> AssumptionReport:
    """Sampled checks of the standing assumptions on ``box`` x [0, T].

    Every constant is an empirical max (or min) over samples; a pass means no
    counterexample was found, not that the assumption is proven.
    """
    if samples < 1:
        raise ProblemError("samples must be >= 1")
    n = spec.dim
    lo, hi = _box_arrays(box, n)
    c = spec.constants
    T = spec.horizon
    width = hi - lo
    diag = float(np.linalg.norm(width))

    def gen(stream):
        return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream])))

    def points(rng, m):
        pts = lo + width * rng.random((m, n))
        # deterministic candidates: centre, corners, origin if inside
        extra = [0.5 * (lo + hi), lo, hi]
        if np.all(lo <= 0) and np.all(hi >= 0):
            extra.append(np.zeros(n))
        return np.concatenate([np.array(extra), pts])

    def unit(rng, m):
        d = rng.standard_normal((m, n))
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    entries = []

    # 2: Lipschitz continuity of b, sigma and the atom maps
    rng = gen(2)
    x = points(rng, samples)
    t = T * rng.random(len(x))
    dirs = unit(rng, len(x))
    fns = {"b": spec.drift_at, "sigma": spec.sigma_at}
    for k, _ in enumerate(spec.jumps.atoms):
        fns[f"atom{k}"] = lambda xx, tt, k=k: (lambda a: a[0][..., None] * a[1])(spec.atoms_at(xx, tt)[k])
    entries.append(_multiscale_entry(2, "Lipschitz continuity", fns, x, t, diag, dirs, 1.0))

    # 3: growth
    rng = gen(3)
    x = points(rng, samples)
    t = T * rng.random(len(x))
    r = np.linalg.norm(x, axis=1)
    est = {
        "b": float(np.max(np.linalg.norm(spec.drift_at(x, t), axis=-1) / (1 + r**c.nu))),
        "sigma": float(np.max(np.linalg.norm(spec.sigma_at(x, t).reshape(len(x), -1), axis=-1) / (1 + r ** (c.nu / 2)))),
    }
    if spec.jumps.atoms:
        tot = sum(lam * np.linalg.norm(z, axis=-1) for lam, z in spec.atoms_at(x, t))
        est["jumps"] = float(np.max(tot / (1 + r**c.nu)))
    ok3 = all(np.isfinite(v) for v in est.values())
    entries.append(AssumptionEntry(3, "growth condition", "pass" if ok3 else "fail", 0.0 if ok3 else -np.inf,
                                   None if ok3 else {"x": x[0].tolist()}, est))

    # 4: Holder continuity of f, g with weight (1 + |x|^gamma + |y|^gamma)
    rng = gen(4)
    x = points(rng, samples)
    t = T * rng.random(len(x))
    dirs = unit(rng, len(x))

    def weight(a, b):
        return 1 + np.linalg.norm(a, axis=1) ** c.gamma + np.linalg.norm(b, axis=1) ** c.gamma

    fns = {"f": spec.f, "g": lambda xx, tt: spec.g(xx)}
    entries.append(_multiscale_entry(4, "Holder continuity", fns, x, t, diag, dirs, c.delta, weight))

    # 5: lower bounds
    rng = gen(5)
    x = points(rng, samples)
    t = T * rng.random(len(x))
    fmin_i = int(np.argmin(spec.f(x, t)))
    gmin_i = int(np.argmin(spec.g(x)))
    fmin = float(spec.f(x, t)[fmin_i])
    gmin = float(spec.g(x)[gmin_i])
    xi = _impulse_samples(rng, width, samples)
    tb = T * rng.random(len(xi))
    Bv = spec.B(xi, tb)
    ratio = (Bv - c.L_bound) / np.linalg.norm(xi, axis=1) ** c.mu
    ci = int(np.argmin(ratio))
    c_hat = float(ratio[ci])
    need_c = c.B_growth if c.B_growth > 0 else 0.0
    margins = {"f": fmin + c.L_bound, "g": gmin + c.L_bound, "B": c_hat - need_c}
    worst_key = min(margins, key=margins.get)
    ok5 = margins["f"] >= 0 and margins["g"] >= 0 and (c_hat > need_c if need_c == 0 else c_hat >= need_c - _ROUNDOFF * need_c)
    witness = {
        "f": {"x": x[fmin_i].tolist(), "t": float(t[fmin_i])},
        "g": {"x": x[gmin_i].tolist()},
        "B": {"xi": xi[ci].tolist(), "t": float(tb[ci])},
    }[worst_key]
    entries.append(AssumptionEntry(5, "lower boundedness", "pass" if ok5 else "fail", float(margins[worst_key]),
                                   witness, {"c": c_hat, "min_f": fmin, "min_g": gmin}))

    # 6: monotonicity in t and subadditivity with slack K
    rng = gen(6)
    xi = _impulse_samples(rng, width, samples)
    eta = _impulse_samples(rng, width, samples)
    # collinear candidates are where subadditivity is tightest
    half = len(xi) // 2
    eta[:half] = xi[:half] * (2.0 * rng.random((half, 1)))
    ts = T * rng.random(len(xi))
    tt = ts + (T - ts) * rng.random(len(xi))
    mono = spec.B(xi, ts) - spec.B(xi, tt)
    mi = int(np.argmin(mono))
    slack = spec.B(xi, ts) + spec.B(eta, ts) - spec.B(xi + eta, ts)
    si = int(np.argmin(slack))
    k_hat = float(slack[si])
    m_mono = float(mono[mi])
    m_sub = k_hat - c.K
    if m_mono < m_sub:
        margin6, wit6 = m_mono, {"xi": xi[mi].tolist(), "s": float(ts[mi]), "t": float(tt[mi])}
    else:
        margin6, wit6 = m_sub, {"xi": xi[si].tolist(), "eta": eta[si].tolist(), "t": float(ts[si])}
    b_scale = max(1.0, float(np.max(np.abs(spec.B(xi + eta, ts)))))
    ok6 = m_mono >= -_ROUNDOFF * b_scale and m_sub >= -_ROUNDOFF * b_scale and c.K > 0
    entries.append(AssumptionEntry(6, "monotonicity and subadditivity", "pass" if ok6 else "fail",
                                   float(margin6), wit6, {"K_hat": k_hat, "K": c.K, "monotone_margin": m_mono}))

    # 7: dominance (declared)
    m7 = min(c.mu - c.gamma - c.delta, c.mu - c.nu)
    ok7 = c.gamma + c.delta < c.mu and c.nu <= c.mu
    entries.append(AssumptionEntry(7, "dominance", "pass" if ok7 else "fail", float(m7),
                                   None if ok7 else {"gamma": c.gamma, "delta": c.delta, "mu": c.mu, "nu": c.nu},
                                   note="declared constants"))

    # 8: no terminal impulse
    rng = gen(8)
    x = points(rng, samples)
    xi = _impulse_samples(rng, width, len(x))
    gap = spec.g(x + xi) + spec.B(xi, np.full(len(x), T)) - spec.g(x)
    gi = int(np.argmin(gap))
    ok8 = gap[gi] >= -1e-12
    entries.append(AssumptionEntry(8, "no terminal impulse", "pass" if ok8 else "fail", float(gap[gi]),
                                   {"x": x[gi].tolist(), "xi": xi[gi].tolist()}))

    # 9-11: jump measure
    entries.extend(_jump_entries(spec, lo, hi, samples, gen, points, unit, diag))
    return AssumptionReport(entries)


def _impulse_samples(rng, width, m):
    """Impulses spread over all scales up to the box width."""
    n = len(width)
    d = rng.standard_normal((m, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    mag = np.exp(rng.uniform(np.log(1e-3), 0.0, (m, 1))) * float(np.max(width))
    return d * mag


def _jump_entries(spec, lo, hi, samples, gen, points, unit, diag):
    c = spec.constants
    jumps = spec.jumps
    T = spec.horizon
    if jumps.empty:
        return [AssumptionEntry(i, name, "skipped", note="no jumps")
                for i, name in ((9, "jump measure representation"), (10, "order-delta jumps"),
                                (11, "continuity of jump measure"))]
    rng = gen(9)
    x = points(rng, samples)
    t = T * rng.random(len(x))
    out = []
    total = 0.0
    lam_min = np.inf
    lam_wit = None
    small_atoms = 0.0
    for lam, z in spec.atoms_at(x, t):
        r = np.linalg.norm(z, axis=-1)
        term = np.where(r < 1, r**2, r ** (c.gamma + c.delta)) * lam
        total += float(np.max(term))
        i = int(np.argmin(lam))
        if lam[i] < lam_min:
            lam_min, lam_wit = float(lam[i]), {"x": x[i].tolist(), "t": float(t[i])}
        small_atoms += float(np.max(np.where(r < 1, lam * r**c.delta, 0.0)))
    if jumps.small is not None:
        total += jumps.small.moment(2.0)
    ok9 = bool(np.isfinite(total)) and lam_min >= 0
    out.append(AssumptionEntry(9, "jump measure representation", "pass" if ok9 else "fail",
                               min(lam_min, 0.0) if np.isfinite(total) else -np.inf,
                               lam_wit, {"moment_bound": total, "min_intensity": lam_min}))

    order = small_atoms
    if jumps.small is not None:
        order += jumps.small.moment(c.delta)
    if jumps.small is None and small_atoms == 0.0:
        out.append(AssumptionEntry(10, "order-delta jumps", "skipped", note="no jumps below unit size"))
    else:
        m10 = jumps.order_delta_bound - order
        ok10 = np.isfinite(order) and m10 >= 0
        out.append(AssumptionEntry(10, "order-delta jumps", "pass" if ok10 else "fail", float(m10),
                                   None if ok10 else {"integral": order, "bound": jumps.order_delta_bound},
                                   {"integral": order}, note="quadrature"))

    if jumps.atoms:
        dirs = unit(rng, len(x))
        fns = {}
        for k, _ in enumerate(jumps.atoms):
            fns[f"intensity{k}"] = lambda xx, tt, k=k: spec.atoms_at(xx, tt)[k][0]
            fns[f"size{k}"] = lambda xx, tt, k=k: spec.atoms_at(xx, tt)[k][1]
        e = _multiscale_entry(11, "continuity of jump measure", fns, x, t, diag, dirs, 1.0)
        out.append(e)
    else:
        out.append(AssumptionEntry(11, "continuity of jump measure", "pass", 0.0,
                                   note="state-independent small-jump density"))
    return out
