import hashlib
import json
import shutil
import subprocess
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from spidp import cli
from spidp import scenario as sc

DATA = Path(str(resources.files("spidp") / "data"))
SCENARIOS = DATA / "scenarios"


def copy_scenario(tmp_path, name, **changes):
    """Copy a bundled scenario (and the data it references) into tmp_path, applying top-level changes."""
    shutil.copytree(DATA / "worlds", tmp_path / "worlds", dirs_exist_ok=True)
    (tmp_path / "scenarios").mkdir(exist_ok=True)
    doc = json.loads((SCENARIOS / f"{name}.json").read_text())
    for k, v in changes.items():
        if v is None:
            doc.pop(k, None)
        else:
            doc[k] = v
    p = tmp_path / "scenarios" / f"{name}.json"
    p.write_text(json.dumps(doc))
    return p


def digest(folder: Path) -> dict:
    return {f.name: hashlib.sha256(f.read_bytes()).hexdigest() for f in sorted(folder.iterdir())}


@pytest.mark.parametrize("name", ["empty_world", "goal_in_obstacle", "around_post", "placing", "spiral_search"])
def test_bundled_scenarios_validate(name, capsys):
    assert cli.main(["validate", str(SCENARIOS / f"{name}.json")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["issues"] == []
    assert "planner.T" in report["defaulted"]


def test_validate_reports_missing_robot(tmp_path, capsys):
    p = copy_scenario(tmp_path, "empty_world", robot="robots/nowhere.json")
    assert cli.main(["validate", str(p)]) == 2
    issues = json.loads(capsys.readouterr().out)["issues"]
    assert any("nowhere.json" in i for i in issues)


def test_validate_reports_unknown_skill(tmp_path, capsys):
    doc = json.loads((SCENARIOS / "placing.json").read_text())
    doc["program"]["skills"][1]["kind"] = "Juggle"
    p = copy_scenario(tmp_path, "placing", program=doc["program"])
    assert cli.main(["validate", str(p)]) == 2
    issues = json.loads(capsys.readouterr().out)["issues"]
    assert any("Juggle" in i for i in issues)


def test_validate_never_raises_on_garbage(tmp_path, capsys):
    p = tmp_path / "x.json"
    p.write_text("{not json")
    assert cli.main(["validate", str(p)]) == 2
    assert cli.main(["validate", str(tmp_path / "absent.json")]) == 2
    capsys.readouterr()


def test_schema_violation_exit_2_with_field_path(tmp_path, capsys):
    p = copy_scenario(tmp_path, "empty_world", start=[0.0, "a", 1.0])
    assert cli.main(["plan", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "start/1" in capsys.readouterr().err


def test_empty_world_plan(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["plan", str(SCENARIOS / "empty_world.json"), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["converged_collision_free"] and summary["iterations"] <= 5
    assert {"trajectory.csv", "history.csv", "summary.json"} <= {f.name for f in out.iterdir()}


def test_goal_in_obstacle_fails(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["plan", str(SCENARIOS / "goal_in_obstacle.json"), "--out", str(out)]) == 1
    summary = json.loads((out / "summary.json").read_text())
    assert not summary["converged_collision_free"]
    assert summary["collision_error"] > 0


def test_trajectory_csv_round_trip(tmp_path):
    from spidp.planner import plan
    out = tmp_path / "o"
    cli.main(["plan", str(SCENARIOS / "around_post.json"), "--out", str(out)])
    scn = sc.load(SCENARIOS / "around_post.json")
    res = plan(scn.plan_problem(), scn.planner)
    header, table = cli.read_csv(out / "trajectory.csv")
    assert header[0] == "t"
    np.testing.assert_array_equal(table[:, 1:], res.trajectory.states.data)


def test_shadow_csv_round_trip(tmp_path):
    from spidp.program import forward
    scn = sc.load(SCENARIOS / "spiral_search.json")
    tr = forward(scn.program, scn.program.x0(), scn.start, scn.world, scn.chain)
    cli.write_csv(tmp_path / "s.csv", tr.columns(), tr.table())
    header, table = cli.read_csv(tmp_path / "s.csv")
    assert header == tr.columns()
    np.testing.assert_array_equal(np.isnan(table), np.isnan(tr.table()))
    np.testing.assert_array_equal(np.nan_to_num(table), np.nan_to_num(tr.table()))


def test_float_format_is_exact():
    rng = np.random.default_rng(0)
    for v in np.concatenate([rng.normal(size=200) * 10.0 ** rng.integers(-300, 300, 200), [0.1, -0.0, 1e-320]]):
        assert float(cli.fmt(v)) == v


def test_reruns_are_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    path = str(SCENARIOS / "around_post.json")
    cli.main(["plan", path, "--seed", "3", "--out", str(a)])
    cli.main(["plan", path, "--seed", "3", "--out", str(b)])
    assert digest(a) == digest(b)


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert cli.main(["plan", str(SCENARIOS / "empty_world.json")]) == 0
    assert (tmp_path / "root" / "empty_world" / "summary.json").is_file()


def test_max_iters_override(tmp_path):
    out = tmp_path / "o"
    cli.main(["plan", str(SCENARIOS / "around_post.json"), "--out", str(out), "--max-iters", "2"])
    summary = json.loads((out / "summary.json").read_text())
    assert summary["iterations"] <= 2 and summary["planner"]["j_max"] == 2


def test_optimize_without_free_parameters(tmp_path):
    doc = json.loads((SCENARIOS / "placing.json").read_text())
    for s in doc["program"]["skills"]:
        for v in s["params"].values():
            if isinstance(v, dict):
                v["optimize"] = False
    doc["optimizer"].pop("randomize_initial")
    p = copy_scenario(tmp_path, "placing", program=doc["program"], optimizer=doc["optimizer"])
    out = tmp_path / "o"
    assert cli.main(["optimize", str(p), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["iterations"] == 1
    header, hist = cli.read_csv(out / "history.csv")
    assert hist.shape[0] == 1


def test_optimize_writes_parameter_file(tmp_path):
    out = tmp_path / "o"
    code = cli.main(["optimize", str(SCENARIOS / "spiral_search.json"), "--out", str(out), "--max-iters", "15"])
    assert code == 0
    params = json.loads((out / "params.json").read_text())
    # the parameter file is a valid program section with the optimized values
    summary = json.loads((out / "summary.json").read_text())
    assert params["skills"][1]["params"]["radius_out"]["value"] == summary["x_final"]["1.SpiralSearch.radius_out"]
    assert summary["best"]["phi_succ"] < summary["initial"]["phi_succ"]
    header, hist = cli.read_csv(out / "history.csv")
    assert header[:6] == ["iteration", "objective", "phi_cyc", "phi_path", "phi_succ", "grad_norm"]
    assert hist.shape[0] == 15


def test_optimize_needs_program(tmp_path, capsys):
    assert cli.main(["optimize", str(SCENARIOS / "empty_world.json"), "--out", str(tmp_path)]) == 2
    assert "program" in capsys.readouterr().err


def test_several_seeds_get_separate_folders(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["plan", str(SCENARIOS / "empty_world.json"), "--seed", "1", "2", "--out", str(out)]) == 0
    assert (out / "seed-1" / "summary.json").is_file() and (out / "seed-2" / "summary.json").is_file()


def test_console_script(tmp_path):
    r = subprocess.run([sys.executable, "-m", "spidp.cli", "plan", str(SCENARIOS / "empty_world.json"),
                        "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
