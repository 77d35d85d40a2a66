"""Tensor space-time grids, fields on them, and interpolation."""
from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = ["Grid", "Field", "ImpulseMap", "interpolate"]


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on ``prod [lo_i, hi_i]`` with ``t_count`` time levels on [0, T]."""

    lo: tuple
    hi: tuple
    counts: tuple
    t_count: int
    horizon: float

    def __post_init__(self):
        if not (len(self.lo) == len(self.hi) == len(self.counts)):
            raise ValueError("lo, hi and counts must have equal length")
        for a, b in zip(self.lo, self.hi):
            if not a < b:
                raise ValueError(f"grid axis needs lo < hi, got [{a}, {b}]")
        if any(int(c) < 2 for c in self.counts):
            raise ValueError("each axis needs at least 2 nodes")
        if self.t_count < 2:
            raise ValueError("t_count must be >= 2")
        if not self.horizon > 0:
            raise ValueError("horizon must be > 0")

    @classmethod
    def make(cls, lo, hi, counts, t_count, horizon):
        lo = tuple(float(v) for v in np.atleast_1d(lo))
        hi = tuple(float(v) for v in np.atleast_1d(hi))
        counts = tuple(int(c) for c in np.atleast_1d(counts))
        if len(counts) == 1 and len(lo) > 1:
            counts = counts * len(lo)
        return cls(lo, hi, counts, int(t_count), float(horizon))

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def shape(self) -> tuple:
        return tuple(self.counts)

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def h(self) -> np.ndarray:
        return (np.asarray(self.hi) - np.asarray(self.lo)) / (np.asarray(self.counts) - 1)

    @property
    def dt(self) -> float:
        return self.horizon / (self.t_count - 1)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.t_count) * self.dt

    def axis(self, i: int) -> np.ndarray:
        return self.lo[i] + np.arange(self.counts[i]) * self.h[i]

    @property
    def axes(self) -> list:
        return [self.axis(i) for i in range(self.dim)]

    def points(self) -> np.ndarray:
        """Node coordinates, shape ``(size, dim)`` in C order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def index_array(self) -> np.ndarray:
        mesh = np.meshgrid(*[np.arange(c) for c in self.counts], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def interior_mask(self, fraction: float = 0.0) -> np.ndarray:
        """Nodes at least ``fraction`` of the box width (and one node) from the lateral boundary."""
        mask = np.ones(self.shape, dtype=bool)
        for i, x in enumerate(self.axes):
            margin = fraction * (self.hi[i] - self.lo[i])
            ok = (x >= self.lo[i] + margin - 1e-12) & (x <= self.hi[i] - margin + 1e-12)
            ok[0] = ok[-1] = False
            shape = [1] * self.dim
            shape[i] = -1
            mask &= ok.reshape(shape)
        return mask

    def nearest_index(self, pts) -> np.ndarray:
        pts = np.atleast_2d(pts)
        idx = np.rint((pts - np.asarray(self.lo)) / self.h).astype(np.int64)
        return np.clip(idx, 0, np.asarray(self.counts) - 1)

    def nearest_slice(self, tau) -> np.ndarray:
        k = np.rint(np.asarray(tau, dtype=float) / self.dt).astype(np.int64)
        return np.clip(k, 0, self.t_count - 1)

    def contains(self, pts, tol: float = 1e-12) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.all((pts >= np.asarray(self.lo) - tol) & (pts <= np.asarray(self.hi) + tol), axis=-1)

    def to_dict(self) -> dict:
        return {
            "lo": list(self.lo),
            "hi": list(self.hi),
            "counts": list(self.counts),
            "t_count": self.t_count,
            "horizon": self.horizon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls.make(d["lo"], d["hi"], d["counts"], d["t_count"], d["horizon"])


def interpolate(values: np.ndarray, grid: Grid, pts, extension: Optional[Callable] = None) -> np.ndarray:
    """Multilinear interpolation of nodal ``values`` at ``pts`` (shape ``(..., n)``).

    Points outside the box are projected onto it; with ``extension`` (the
    terminal cost ``g``) the increment ``g(p) - g(proj p)`` is added.
    """
    pts = np.asarray(pts, dtype=float)
    batch = pts.shape[:-1]
    p = pts.reshape(-1, grid.dim)
    lo = np.asarray(grid.lo)
    hi = np.asarray(grid.hi)
    h = grid.h
    counts = np.asarray(grid.counts)
    q = np.clip(p, lo, hi)
    rel = (q - lo) / h
    i0 = np.clip(np.floor(rel).astype(np.int64), 0, counts - 2)
    w = np.clip(rel - i0, 0.0, 1.0)
    out = np.zeros(len(p))
    for corner in itertools.product((0, 1), repeat=grid.dim):
        c = np.asarray(corner)
        weight = np.prod(np.where(c == 1, w, 1.0 - w), axis=1)
        idx = tuple((i0 + c).T)
        out += weight * values[idx]
    if extension is not None:
        outside = np.any(p != q, axis=1)
        if np.any(outside):
            out[outside] += extension(p[outside]) - extension(q[outside])
    return out.reshape(batch)


@dataclass
class Field:
    """One time slice of nodal values on a grid."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"field shape {self.values.shape} does not match grid {self.grid.shape}")

    @classmethod
    def from_function(cls, grid: Grid, fn) -> "Field":
        return cls(grid, np.asarray(fn(grid.points()), dtype=float).reshape(grid.shape))

    def at(self, pts, extension=None) -> np.ndarray:
        return interpolate(self.values, self.grid, pts, extension)

    def to_csv(self) -> str:
        return _csv(self.grid, {"value": self.values.ravel()})

    @classmethod
    def from_csv(cls, grid: Grid, text: str) -> "Field":
        cols = _read_csv(text, grid, ["value"])
        return cls(grid, cols["value"].reshape(grid.shape))


@dataclass
class ImpulseMap:
    """Per-node impulse ``xi`` where ``present`` is set."""

    grid: Grid
    xi: np.ndarray
    present: np.ndarray

    def to_csv(self) -> str:
        n = self.grid.dim
        xi = np.where(self.present[..., None], self.xi, 0.0).reshape(-1, n)
        cols = {"present": self.present.ravel().astype(int)}
        cols.update({f"xi{i}": xi[:, i] for i in range(n)})
        return _csv(self.grid, cols)

    @classmethod
    def from_csv(cls, grid: Grid, text: str) -> "ImpulseMap":
        names = ["present"] + [f"xi{i}" for i in range(grid.dim)]
        cols = _read_csv(text, grid, names)
        xi = np.stack([cols[f"xi{i}"] for i in range(grid.dim)], axis=-1).reshape(grid.shape + (grid.dim,))
        return cls(grid, xi, cols["present"].astype(bool).reshape(grid.shape))


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _csv(grid: Grid, cols: dict) -> str:
    n = grid.dim
    idx = grid.index_array()
    pts = grid.points()
    header = [f"i{i}" for i in range(n)] + [f"x{i}" for i in range(n)] + list(cols)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in range(grid.size):
        row = [str(int(v)) for v in idx[r]] + [_fmt(v) for v in pts[r]]
        row += [_fmt(c[r]) for c in cols.values()]
        w.writerow(row)
    return buf.getvalue()


def _read_csv(text: str, grid: Grid, names: list) -> dict:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValueError("empty CSV")
    header = rows[0]
    n = grid.dim
    expected = [f"i{i}" for i in range(n)] + [f"x{i}" for i in range(n)] + names
    if header != expected:
        raise ValueError(f"unexpected CSV header {header}")
    body = rows[1:]
    if len(body) != grid.size:
        raise ValueError(f"CSV has {len(body)} rows, grid has {grid.size} nodes")
    data = np.array([[float(v) for v in row] for row in body])
    if not np.all(np.isfinite(data)):
        raise ValueError("non-finite value in CSV")
    if not np.array_equal(data[:, :n].astype(np.int64), grid.index_array()):
        raise ValueError("CSV node indices do not match grid order")
    return {name: data[:, 2 * n + k] for k, name in enumerate(names)}


def grid_sidecar(grid: Grid) -> str:
    return json.dumps(grid.to_dict(), indent=2, sort_keys=True)
