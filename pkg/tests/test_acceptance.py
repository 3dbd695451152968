"""The nine acceptance criteria, each at its stated tolerance and time limit.

Every test prints one PASS/FAIL line straight to the terminal (also under
output capture), then asserts.
"""
import json
import math
import time

import numpy as np
import pytest

from mountopt.bohb import BohbConfig, halving_counts, make_brackets, optimize, random_search
from mountopt.cli import main
from mountopt.experiment import TABLETOP, ExperimentConfig, format_rate, pearson, run_experiment
from mountopt.feasibility import (
    FMM_QUOTED_REFERENCE_X,
    center_of_mass,
    dynamic_stability,
    fmm_worst_case_layout,
    static_stability,
)
from mountopt.kinematics import forward_kinematics_matrix, jacobian
from mountopt.manipulability import manipulability_measure
from mountopt.sim import DT, closed_form_base, integrate_base
from mountopt.tasks import HEIGHT_BANDS, sample_episode
from mountopt._geometry import rotation_log

from conftest import planar_arm


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail, elapsed, limit):
        ok = bool(ok) and elapsed < limit
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {title}: {detail} "
                  f"({elapsed:.2f} s, limit {limit:g} s)")
        assert ok, f"criterion {number}: {detail} in {elapsed:.2f} s"
    return emit


def test_1_tipover(verdict):
    t = time.perf_counter()
    layout = fmm_worst_case_layout()
    com = center_of_mass(layout)
    rep = dynamic_stability(layout, reference_x=FMM_QUOTED_REFERENCE_X)
    stable, _ = static_stability(layout)
    elapsed = time.perf_counter() - t
    ok = (abs(com[0] - 0.132) <= 0.002 and abs(com[1] - 0.109) <= 0.002
          and abs(rep.tau_critical - 231.76) <= 0.1
          and abs(rep.tau_grav - 136.8) <= 0.15 * 136.8
          and abs(rep.tau_acc - 21.6) <= 0.15 * 21.6 and stable)
    verdict(1, "tipover", ok, f"COM ({com[0]:.4f}, {com[1]:.4f}) m, tau_critical "
            f"{rep.tau_critical:.2f}, tau_grav {rep.tau_grav:.1f}, tau_acc {rep.tau_acc:.1f} N m, "
            f"static {stable}", elapsed, 1)


def test_2_planar_manipulability(verdict):
    rng = np.random.default_rng(20)
    t = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        l1, l2 = rng.uniform(0.1, 2.0, 2)
        t1, t2 = rng.uniform(-math.pi, math.pi, 2)
        J = jacobian(planar_arm([l1, l2]), [t1, t2])[:2]
        worst = max(worst, abs(manipulability_measure(J) - l1 * l2 * abs(math.sin(t2))))
    singular = [manipulability_measure(jacobian(planar_arm([l1, 0.7]), [t1, t2])[:2])
                for l1, t1, t2 in ((1.0, 0.3, 0.0), (0.4, -2.0, 0.0), (1.3, 1.0, 0.0))]
    elapsed = time.perf_counter() - t
    verdict(2, "planar 2R manipulability", worst <= 1e-9 and singular == [0.0] * 3,
            f"max |m - l1 l2 |sin t2|| = {worst:.1e}, singular {singular}", elapsed, 1)


def test_3_jacobian_central_difference(verdict, franka):
    rng = np.random.default_rng(30)
    eps = 1e-6
    t = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        q = rng.uniform(franka.lower_limits, franka.upper_limits)
        J = jacobian(franka, q)
        fd = np.empty_like(J)
        for i in range(franka.dof):
            dq = np.zeros(franka.dof)
            dq[i] = eps
            Tp = forward_kinematics_matrix(franka, q + dq)
            Tm = forward_kinematics_matrix(franka, q - dq)
            fd[:3, i] = (Tp[:3, 3] - Tm[:3, 3]) / (2 * eps)
            fd[3:, i] = rotation_log(Tp[:3, :3] @ Tm[:3, :3].T) / (2 * eps)
        worst = max(worst, np.linalg.norm(fd - J) / np.linalg.norm(J))
    elapsed = time.perf_counter() - t
    verdict(3, "Jacobian vs central differences", worst <= 1e-5,
            f"max relative error {worst:.1e} over 100 configurations", elapsed, 5)


def test_4_hyperband_geometry(verdict):
    t = time.perf_counter()
    cfg = BohbConfig(b_min=300_000, b_max=1_000_000, eta=3)
    b1, b0 = make_brackets(cfg)
    published = (cfg.s_max == 1 and (b1.s, b1.counts) == (1, (3, 1))
                 and np.allclose(b1.budgets, (1_000_000 / 3, 1_000_000))
                 and (b0.s, b0.counts, b0.budgets) == (0, (2,), (1_000_000,)))
    closed = all(halving_counts(n0, eta, 5) == tuple(max(1, n0 // eta ** i) for i in range(5))
                 for eta in (2, 3, 4) for n0 in range(1, 82))
    elapsed = time.perf_counter() - t
    verdict(4, "Hyperband geometry", published and closed,
            f"brackets {[(b.counts, b.budgets) for b in (b1, b0)]}, closed form {closed}",
            elapsed, 1)


OPTIMUM = np.array([0.3, 0.7, 0.55, 0.2, 0.65, 0.4])


def sphere(u, budget, seed):
    return 1.0 - float(np.sum((np.asarray(u) - OPTIMUM) ** 2)) / len(OPTIMUM)


def test_5_optimizer_beats_random_search(verdict):
    cfg = BohbConfig(b_min=1, b_max=3, max_designs=60)
    t = time.perf_counter()
    margins, hits = [], 0
    for seed in range(20):
        best = optimize(6, sphere, cfg, seed).best
        rs = max(score for _, score in random_search(6, sphere, 60, seed))
        margins.append(best.score - rs)
        if seed < 10:
            hits += np.max(np.abs(np.array(best.unit) - OPTIMUM)) <= 0.15
    elapsed = time.perf_counter() - t
    median = float(np.median(margins))
    verdict(5, "BOHB vs random search on a 6-D sphere", median > 0 and hits >= 9,
            f"median margin {median:+.4f} over 20 seeds, L-inf <= 0.15 in {hits}/10 seeds "
            f"(need > 0 and >= 9)", elapsed, 30)


@pytest.mark.slow
def test_6_codesign_beats_the_tabletop(verdict, tmp_path):
    tasks = ("RandomGoal", "Drawer")
    t = time.perf_counter()
    margins = []
    for seed in range(5):
        cfg = ExperimentConfig(mode="task", train_tasks=tasks, val_tasks=tasks, test_tasks=tasks,
                               bohb=BohbConfig(b_min=8, b_max=24, eta=3, max_designs=80),
                               validation_episodes=50, test_episodes=100, top_k=1, seed=seed,
                               output_dir=str(tmp_path / str(seed)))
        rep = run_experiment(cfg)
        margins.append(rep.row("Rank 1").average - rep.row(TABLETOP).average)
    elapsed = time.perf_counter() - t
    wins = sum(m > 0 for m in margins)
    verdict(6, "co-design beats the tabletop mount", wins >= 4,
            f"test margins {[round(m, 3) for m in margins]}, {wins}/5 positive", elapsed, 900)


def test_7_correlation_and_error_bars(verdict):
    t = time.perf_counter()
    # dx = -2..2, dy = (-2, 0, 1, 0, 1): sum dx dy = 6, sxx = 10, syy = 6
    r = pearson([1, 2, 3, 4, 5], [2, 4, 5, 4, 5])
    text = format_rate(30, 100)
    elapsed = time.perf_counter() - t
    verdict(7, "Pearson and binomial error", abs(r - math.sqrt(0.6)) <= 1e-12
            and text == "30 ± 4.6", f"r = {r!r}, rate {text!r}", elapsed, 1)


def test_8_determinism_and_resume(verdict, tmp_path, monkeypatch):
    monkeypatch.setenv("MOUNTOPT_WORKERS", "1")
    cfg = ExperimentConfig(mode="task", train_tasks=("RandomGoal", "Drawer"),
                           val_tasks=("RandomGoal", "Drawer"), test_tasks=("RandomGoal", "Drawer"),
                           bohb=BohbConfig(b_min=8, b_max=24, eta=3, max_designs=10),
                           validation_episodes=5, test_episodes=10, top_k=2, seed=4)
    path = cfg.dump(tmp_path / "exp.yaml")
    t = time.perf_counter()
    runs = [tmp_path / "a", tmp_path / "b"]
    codes = [main(["optimize", "--config", str(path), "--out", str(run)]) for run in runs]
    histories = [(run / "history.jsonl").read_bytes() for run in runs]
    reports = {name: (runs[0] / name).read_bytes()
               for name in ("report.json", "report.csv", "report.txt")}
    lines = histories[0].decode().splitlines(keepends=True)
    (runs[1] / "history.jsonl").write_text("".join(lines[: len(lines) // 2]))
    for name in reports:
        (runs[1] / name).unlink()
    codes.append(main(["resume", str(runs[1])]))
    resumed = all((runs[1] / name).read_bytes() == data for name, data in reports.items())
    elapsed = time.perf_counter() - t
    ok = codes == [0, 0, 0] and histories[0] == histories[1] and resumed
    n = len(json.loads(reports["report.json"])["ranking"])
    verdict(8, "determinism and resume", ok,
            f"{len(lines)} history lines identical: {histories[0] == histories[1]}, "
            f"resumed from {len(lines) // 2} to an identical report ({n} ranked): {resumed}",
            elapsed, 300)


def test_9_integration_and_height_bands(verdict):
    rng = np.random.default_rng(90)
    t = time.perf_counter()
    worst = 0.0
    for drive in ("omni", "diff"):
        for _ in range(20):
            pose = tuple(rng.uniform([-3, -3, -math.pi], [3, 3, math.pi]))
            twist = tuple(rng.uniform([-1.1, -1.1, -1.0], [1.1, 1.1, 1.0]))
            p = pose
            for _ in range(1000):
                p = integrate_base(p, twist, DT, drive)
            q = closed_form_base(pose, twist, 1000 * DT, drive)
            worst = max(worst, float(np.max(np.abs(np.subtract(p, q)))))
    outside = {}
    for task in ("RandomGoal", "Drawer", "Cabinet"):
        lo, hi = HEIGHT_BANDS[task]
        outside[task] = sum(
            not (lo <= z.min() and z.max() <= hi)
            for z in (sample_episode(task, seed=s).trajectory.positions[:, 2]
                      for s in range(10_000)))
    elapsed = time.perf_counter() - t
    bands = {t: HEIGHT_BANDS[t] for t in outside}
    verdict(9, "integration and height bands", worst <= 1e-9 and not any(outside.values()),
            f"max pose error {worst:.1e} over 1000 steps (omni, diff); samples outside "
            f"{bands}: {outside}", elapsed, 10)
