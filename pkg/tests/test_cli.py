import json
from importlib import resources

import pytest
import yaml

from mountopt.cli import EXIT_EMPTY, EXIT_INFEASIBLE, EXIT_OK, load_design, main
from mountopt.robot import DesignParams


def heavy_robot(tmp_path):
    """The bundled robot with every non-base mass scaled up, written as a file."""
    data = yaml.safe_load((resources.files("mountopt") / "robots" / "fmm_franka.yaml").read_text())
    for link in data["links"]:
        if link["name"] != "base_link" and "mass" in link:
            link["mass"] = float(str(link["mass"]).split()[0]) * 8
    path = tmp_path / "heavy.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


def test_design_strings_and_files(tmp_path):
    assert load_design(None) == DesignParams()
    assert load_design("alpha=30deg,x=0.1") == DesignParams(arm_pitch_alpha=0.5235987755982988,
                                                            forward_x=0.1)
    p = tmp_path / "d.yaml"
    p.write_text("omega:\n  arm_pitch_alpha: 0.2\n  lateral_y: -0.1\n")
    assert load_design(str(p)) == DesignParams(arm_pitch_alpha=0.2, lateral_y=-0.1)


def test_feasibility_exit_codes(tmp_path, capsys):
    assert main(["feasibility"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["feasible"] is True
    heavy = heavy_robot(tmp_path)
    assert main(["feasibility", "--robot", str(heavy), "--design", "alpha=90deg,x=0.15"]) \
        == EXIT_INFEASIBLE


def test_bad_design_is_an_error(capsys):
    assert main(["feasibility", "--design", "alpha=3"]) == 1
    assert "outside" in capsys.readouterr().err


def test_evaluate_prints_rates(tmp_path, capsys):
    rec = tmp_path / "eps.jsonl"
    code = main(["evaluate", "--tasks", "RandomGoal", "--episodes", "2", "--records", str(rec)])
    assert code == EXIT_OK
    assert capsys.readouterr().out.startswith("RandomGoal: ")
    rows = [json.loads(line) for line in rec.read_text().splitlines()]
    assert len(rows) == 2 and {"success", "failure", "thresholds"} <= set(rows[0])


def test_evaluate_with_no_tasks():
    assert main(["evaluate", "--tasks", ",", "--episodes", "2"]) == EXIT_EMPTY


def test_manipulability_writes_heatmap(tmp_path, capsys):
    out = tmp_path / "h.csv"
    assert main(["manipulability", "--spacing", "0.8", "--out", str(out)]) == EXIT_OK
    assert out.read_text().startswith("x,y,z,orientation_index,m")
    assert capsys.readouterr().out.startswith("mu = ")


def write_config(tmp_path, **extra):
    cfg = {"mode": "manipulability", "bohb": {"b_min": 1, "b_max": 3, "max_designs": 5},
           "train_tasks": ["RandomGoal"], "test_tasks": ["RandomGoal"], "test_episodes": 1,
           "test_budget": 8, "top_k": 1, "mu_spacing": 0.4, **extra}
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_optimize_report_and_resume(tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["optimize", "--config", str(write_config(tmp_path)), "--out", str(run)]) == EXIT_OK
    first = (run / "report.json").read_bytes()
    assert main(["report", str(run), "--out", str(tmp_path / "again")]) == EXIT_OK
    assert (tmp_path / "again" / "report.json").read_bytes() == first
    lines = (run / "history.jsonl").read_text().splitlines()
    (run / "history.jsonl").write_text("\n".join(lines[:2]) + "\n")
    assert main(["resume", str(run)]) == EXIT_OK
    assert (run / "report.json").read_bytes() == first


def test_report_on_empty_history(tmp_path):
    (tmp_path / "history.jsonl").write_text("")
    assert main(["report", str(tmp_path)]) == EXIT_EMPTY
    assert main(["resume", str(tmp_path)]) == EXIT_EMPTY


def test_workers_env_is_honoured(tmp_path, monkeypatch):
    monkeypatch.setenv("MOUNTOPT_WORKERS", "nope")
    run = tmp_path / "run"
    assert main(["optimize", "--config", str(write_config(tmp_path)), "--out", str(run)]) == 1
