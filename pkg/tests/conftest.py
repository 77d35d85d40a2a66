import json
import pathlib

import pytest

from impulse_qvi.grid import Grid
from impulse_qvi.model import load_problem, parse_problem
from impulse_qvi.solver import SolverConfig, solve_penalized

ROOT = pathlib.Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
DATA = pathlib.Path(__file__).resolve().parent / "data"

BASE = {
    "dim": 1,
    "horizon": 1.0,
    "discount": 0.0,
    "drift": "0",
    "diffusion": "sqrt(2)",
    "running_cost": "0",
    "terminal_cost": "x[0]^2",
    "intervention_cost": "1 + xi[0]^2",
    "constants": {"gamma": 0.2, "delta": 0.5, "mu": 1.0, "K": 1.0, "L_bound": 1.0},
}


def make_problem(strict=True, **overrides):
    doc = json.loads(json.dumps(BASE))
    doc.update(overrides)
    return parse_problem(json.dumps(doc), strict=strict)


def shipped(name):
    return load_problem(CONFIGS / "problems" / f"{name}.json")


def shipped_config(name, **overrides):
    doc = json.loads((CONFIGS / "solvers" / f"{name}.json").read_text())
    doc.update(overrides)
    spec = shipped(name)
    doc["grid"] = Grid.from_dict({**doc["grid"], "horizon": spec.horizon})
    return SolverConfig.from_dict(doc)


@pytest.fixture(scope="session")
def heat():
    spec = shipped("heat_baseline")
    return spec, solve_penalized(spec, shipped_config("heat_baseline"))


@pytest.fixture(scope="session")
def controlled():
    spec = shipped("controlled_1d")
    return spec, solve_penalized(spec, shipped_config("controlled_1d"))


@pytest.fixture(scope="session")
def lattice_reference():
    return json.loads((DATA / "lattice_reference.json").read_text())


# one summary line per acceptance criterion, printed at the end of the run
ACCEPTANCE = {}


def record_criterion(number, ok, message):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {message}"
    ACCEPTANCE[number] = line
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
