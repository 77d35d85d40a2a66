import json
import subprocess
import sys

import pytest

from impulse_qvi.cli import main

from conftest import BASE, CONFIGS

SMALL_SOLVER = {
    "grid": {"lo": [-2.0], "hi": [2.0], "counts": [41], "t_count": 21},
    "epsilon_schedule": [1e-1, 1e-3, 1e-5, 1e-7],
}
QUICK_MC = {"dt": 0.01, "n_paths": 2000, "seed": 4}


def write(path, obj):
    path.write_text(json.dumps(obj) if not isinstance(obj, str) else obj)
    return str(path)


@pytest.fixture
def files(tmp_path):
    controlled = json.loads((CONFIGS / "problems" / "controlled_1d.json").read_text())
    return {
        "problem": write(tmp_path / "problem.json", controlled),
        "solver": write(tmp_path / "solver.json", SMALL_SOLVER),
        "mc": write(tmp_path / "mc.json", QUICK_MC),
        "tmp": tmp_path,
    }


@pytest.fixture
def solved(files):
    out = files["tmp"] / "sol"
    assert main(["solve", "--problem", files["problem"], "--solver", files["solver"], "--out", str(out)]) == 0
    return out


def snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def without_wall_time(data: bytes):
    doc = json.loads(data)
    doc.pop("wall_time")
    return doc


def assert_same_run(a, b):
    assert a.keys() == b.keys()
    for name in a:
        if name.endswith("manifest.json"):
            assert without_wall_time(a[name]) == without_wall_time(b[name])
        else:
            assert a[name] == b[name], name


def test_solve_writes_layout(solved, capsys):
    names = snapshot(solved)
    for required in ("manifest.json", "summary.json", "problem.json", "solver.json", "grid.json",
                     "slices/u_00000.csv", "slices/Mu_00020.csv", "masks/action_00020.csv", "impulse/xi_00020.csv"):
        assert required in names
    summary = json.loads(names["summary.json"])
    assert "wall_time" not in summary["diagnostics"]
    assert summary["residuals"]["comp_max"] >= 0
    manifest = json.loads(names["manifest.json"])
    assert manifest["command"] == "solve" and "wall_time" in manifest and len(manifest["input_hash"]) == 64


def test_solve_is_byte_deterministic(files, solved):
    first = snapshot(solved)
    assert main(["solve", "--problem", files["problem"], "--solver", files["solver"], "--out", str(solved)]) == 0
    assert_same_run(first, snapshot(solved))


def test_input_hash_tracks_input_bytes(files, solved):
    before = json.loads((solved / "manifest.json").read_text())["input_hash"]
    doc = json.loads((files["tmp"] / "solver.json").read_text())
    write(files["tmp"] / "solver.json", json.dumps(doc, indent=1))
    other = files["tmp"] / "other"
    assert main(["solve", "--problem", files["problem"], "--solver", files["solver"], "--out", str(other)]) == 0
    assert json.loads((other / "manifest.json").read_text())["input_hash"] != before


def test_dominance_violation_exits_2_unless_forced(files, capsys):
    doc = dict(BASE, constants={"gamma": 0.5, "delta": 0.5, "mu": 0.9, "K": 1.0, "L_bound": 1.0},
               intervention_cost="1000000 + xi[0]^2")
    bad = write(files["tmp"] / "bad.json", doc)
    out = str(files["tmp"] / "o")
    assert main(["solve", "--problem", bad, "--solver", files["solver"], "--out", out]) == 2
    assert "assumption failure" in capsys.readouterr().err
    assert main(["solve", "--problem", bad, "--solver", files["solver"], "--out", out, "--force"]) == 0
    assert json.loads((files["tmp"] / "o" / "summary.json").read_text())["forced"] is True


def test_sampled_assumption_failure_exits_2(files, capsys):
    doc = dict(BASE, intervention_cost="abs(xi[0])",
               constants={"gamma": 0.2, "delta": 0.5, "mu": 1.0, "K": 0.5, "L_bound": 0.0})
    bad = write(files["tmp"] / "bad.json", doc)
    assert main(["solve", "--problem", bad, "--solver", files["solver"], "--out", str(files["tmp"] / "o")]) == 2
    assert "6 (monotonicity and subadditivity)" in capsys.readouterr().err


def test_missing_file_exits_1(files, capsys):
    missing = str(files["tmp"] / "nope.json")
    assert main(["solve", "--problem", missing, "--solver", files["solver"], "--out", str(files["tmp"] / "o")]) == 1
    assert missing in capsys.readouterr().err


def test_bad_expression_exits_2(files, capsys):
    doc = dict(BASE, running_cost="x[0] +* 2")
    bad = write(files["tmp"] / "bad.json", doc)
    assert main(["solve", "--problem", bad, "--solver", files["solver"], "--out", str(files["tmp"] / "o")]) == 2
    assert "column" in capsys.readouterr().err


def test_simulate_brownian(files, capsys):
    doc = dict(BASE, diffusion="1", intervention_cost="1 + xi[0]^2")
    prob = write(files["tmp"] / "bm.json", doc)
    mc = write(files["tmp"] / "mc20.json", {"dt": 0.01, "n_paths": 20000, "seed": 0})
    out = files["tmp"] / "sim"
    assert main(["simulate", "--problem", prob, "--strategy", "none", "--x0", "1.5", "--t0", "0",
                 "--mc", mc, "--out", str(out)]) == 0
    est = json.loads((out / "estimate.json").read_text())
    assert abs(est["mean"] - 3.25) <= est["ci95"] + 1e-2
    assert est["strategy"] == {"type": "none"}


def test_simulate_zero_paths_exits_2(files, capsys):
    mc = write(files["tmp"] / "zero.json", {"dt": 0.01, "n_paths": 0})
    assert main(["simulate", "--problem", files["problem"], "--strategy", "none", "--x0", "0",
                 "--mc", mc, "--out", str(files["tmp"] / "o")]) == 2
    assert "n_paths" in capsys.readouterr().err


@pytest.mark.parametrize("strategy, kind", [
    ("none", "none"),
    ("policy:{sol}", "policy"),
    ("schedule:0.5=1.0;0.25=-0.5", "schedule"),
    ("threshold:" + str(CONFIGS / "strategies" / "threshold_1d.json"), "threshold"),
])
def test_simulate_strategy_dispatch_and_determinism(files, solved, strategy, kind):
    strategy = strategy.format(sol=solved)
    out = files["tmp"] / f"sim_{kind}"
    argv = ["simulate", "--problem", files["problem"], "--strategy", strategy, "--x0", "2.5", "--t0", "0",
            "--mc", files["mc"], "--out", str(out), "--dump-paths", "2"]
    assert main(argv) == 0
    est = json.loads((out / "estimate.json").read_text())
    assert est["strategy"]["type"] == kind
    assert (out / "paths" / "path_00001.csv").is_file()
    first = snapshot(out)
    assert main(argv) == 0
    assert_same_run(first, snapshot(out))


def test_simulate_unknown_strategy_exits_2(files):
    assert main(["simulate", "--problem", files["problem"], "--strategy", "magic", "--x0", "0",
                 "--mc", files["mc"], "--out", str(files["tmp"] / "o")]) == 2


def test_validate_all_checks(files, solved, capsys):
    out = files["tmp"] / "val"
    argv = ["validate", "--solution", str(solved), "--out", str(out), "--x0", "0.5", "--mc", files["mc"],
            "--box=-1:1", "--n-probes", "100"]
    assert main(argv) == 0
    reports = json.loads((out / "report.json").read_text())
    assert [r["id"] for r in reports] == ["dpp", "dpp", "bounds", "obstacle", "viscosity"]
    assert set(reports[0]["tolerances"]) == {"stat", "disc"}
    assert reports[1]["details"]["stop_rule"] == {"box": [[-1.0, 1.0]]}
    first = snapshot(out)
    assert main(argv) == 0
    assert_same_run(first, snapshot(out))


def test_validate_detects_corrupted_csv(files, solved, capsys):
    target = solved / "slices" / "u_00010.csv"
    target.write_text(target.read_text().replace("0.", "1.", 1))
    assert main(["validate", "--solution", str(solved), "--checks", "bounds", "--out", str(files["tmp"] / "v")]) == 1
    assert "artifact integrity" in capsys.readouterr().err


def test_validate_unknown_check_exits_2(files, solved):
    assert main(["validate", "--solution", str(solved), "--checks", "bogus", "--out", str(files["tmp"] / "v")]) == 2


def test_module_entry_point(files):
    proc = subprocess.run([sys.executable, "-m", "impulse_qvi", "simulate", "--problem", files["problem"],
                           "--strategy", "none", "--x0", "0", "--mc", files["mc"], "--out", str(files["tmp"] / "m")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.startswith("J = ")
