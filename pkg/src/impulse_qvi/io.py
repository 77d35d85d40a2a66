"""On-disk layout of solution directories and run manifests.

A solution directory holds::

    manifest.json            command, inputs, content hash, seeds, version, wall time
    problem.json solver.json copies of the inputs
    grid.json                grid metadata
    slices/u_KKKKK.csv       value u(., tau_k) = V(., T - tau_k)
    slices/Mu_KKKKK.csv      intervention operator applied to that slice
    masks/action_KKKKK.csv   1 on action nodes
    impulse/xi_KKKKK.csv     argmin impulse where the action mask is set
    summary.json             config echo, diagnostics, residuals, file checksums

Everything except the manifest is a pure function of the inputs.
"""
from __future__ import annotations

import hashlib
import json
import platform
from pathlib import Path

import numpy as np

from . import __version__
from .grid import Field, Grid, ImpulseMap, _csv, _read_csv, grid_sidecar
from .solver import Solution

__all__ = ["ArtifactError", "save_solution", "load_solution", "write_manifest", "content_hash", "dump_json"]


class ArtifactError(RuntimeError):
    """A solution directory is missing pieces or fails its checksums."""


def dump_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    return obj


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def content_hash(parts) -> str:
    """sha256 over ``(name, bytes)`` pairs, length-prefixed so boundaries count."""
    h = hashlib.sha256()
    for name, data in parts:
        if isinstance(data, str):
            data = data.encode()
        for piece in (name.encode(), data):
            h.update(len(piece).to_bytes(8, "big"))
            h.update(piece)
    return h.hexdigest()


def write_manifest(out: Path, command: str, inputs: dict, seeds: dict, wall_time: float, extra=None) -> dict:
    """``inputs`` maps a label to ``(path_or_None, bytes)``; flags go in as bytes too."""
    manifest = {
        "command": command,
        "inputs": {k: (None if p is None else str(p)) for k, (p, _) in inputs.items()},
        "input_hash": content_hash((k, data) for k, (_, data) in sorted(inputs.items())),
        "seeds": seeds,
        "artifact_dir": str(out),
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "wall_time": wall_time,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(dump_json(manifest))
    return manifest


def _name(prefix: str, k: int) -> str:
    return f"{prefix}_{k:05d}.csv"


def save_solution(sol: Solution, out: Path, problem_text: str, solver_text: str, summary: dict) -> None:
    out = Path(out)
    for sub in ("slices", "masks", "impulse"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    grid = sol.grid
    files = {
        "problem.json": problem_text,
        "solver.json": solver_text,
        "grid.json": grid_sidecar(grid) + "\n",
    }
    for k in range(grid.t_count):
        files[f"slices/{_name('u', k)}"] = Field(grid, sol.values[k]).to_csv()
        files[f"slices/{_name('Mu', k)}"] = Field(grid, sol.Mu[k]).to_csv()
        files[f"masks/{_name('action', k)}"] = _csv(grid, {"action": sol.action[k].ravel().astype(int)})
        files[f"impulse/{_name('xi', k)}"] = sol.impulse_map(k).to_csv()
    checksums = {}
    for rel, text in files.items():
        data = text.encode()
        (out / rel).write_bytes(data)
        checksums[rel] = _sha(data)
    summary = dict(summary)
    summary["checksums"] = checksums
    (out / "summary.json").write_text(dump_json(summary))


def load_solution(path) -> tuple:
    """Return ``(Solution, problem_text, summary)`` after verifying every checksum."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"solution directory not found: {path}")
    try:
        summary = json.loads((path / "summary.json").read_text())
        checksums = summary["checksums"]
    except (OSError, ValueError, KeyError) as err:
        raise ArtifactError(f"artifact integrity: unreadable summary.json in {path} ({err})") from None
    texts = {}
    for rel, digest in checksums.items():
        f = path / rel
        if not f.is_file():
            raise ArtifactError(f"artifact integrity: missing {f}")
        data = f.read_bytes()
        if _sha(data) != digest:
            raise ArtifactError(f"artifact integrity: checksum mismatch for {f}")
        texts[rel] = data.decode()
    try:
        grid = Grid.from_dict(json.loads(texts["grid.json"]))
        n_slices = grid.t_count
        values = np.empty((n_slices,) + grid.shape)
        Mu = np.empty_like(values)
        action = np.empty((n_slices,) + grid.shape, dtype=bool)
        xi = np.empty((n_slices,) + grid.shape + (grid.dim,))
        for k in range(n_slices):
            values[k] = Field.from_csv(grid, texts[f"slices/{_name('u', k)}"]).values
            Mu[k] = Field.from_csv(grid, texts[f"slices/{_name('Mu', k)}"]).values
            action[k] = _read_csv(texts[f"masks/{_name('action', k)}"], grid, ["action"])["action"].reshape(grid.shape) > 0
            xi[k] = ImpulseMap.from_csv(grid, texts[f"impulse/{_name('xi', k)}"]).xi
    except (KeyError, ValueError) as err:
        raise ArtifactError(f"artifact integrity: {err}") from None
    sol = Solution(grid, values, Mu, xi, action, summary.get("diagnostics", {}))
    return sol, texts["problem.json"], summary
