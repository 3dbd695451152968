"""Experiment wiring: config files, the two scoring modes, held-out testing,
and the ranking report.

A run leaves three files behind: ``history.jsonl`` (one record per BOHB
evaluation), ``test.jsonl`` (one record per held-out design test) and the
echoed ``config.yaml``.  Everything in the report is recomputed from the
two JSONL files.
"""
from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .bohb import BohbConfig, optimize, read_history
from .controller import episodes_for, success_counts, tune_policy
from .exceptions import ConfigInvalid, DegenerateInput
from .feasibility import check_design
from .manipulability import WorkspaceGrid, global_manipulability
from .robot import DesignParams, DesignSpace, apply_design, encode_unit, load_robot, with_drive
from .tasks import TASKS

MODES = ("task", "manipulability")
TABLETOP = "Tabletop Mount"
# rung 0 (b_max) uses the first spacing, one rung down the next, and so on
SPACING_LEVELS = (0.1, 0.4 / 3, 0.2)
# test episodes come from a seed stream disjoint from validation
TEST_SEED_OFFSET = 7_777


@dataclass(frozen=True)
class ExperimentConfig:
    robot: str = "fmm_franka"
    mode: str = "task"
    train_tasks: tuple = ("RandomObstacle",)
    val_tasks: tuple = ("RandomObstacle",)
    test_tasks: tuple = TASKS
    bohb: BohbConfig = field(default_factory=BohbConfig)
    validation_episodes: int = 50
    test_episodes: int = 100
    test_budget: float | None = None     # tuning episodes for test runs; None = b_max
    top_k: int = 3
    seed: int = 0
    output_dir: str = "runs/experiment"
    mu_spacing: float = 0.1
    flat: bool = False
    drive: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigInvalid(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("train_tasks", "val_tasks", "test_tasks"):
            tasks = tuple(getattr(self, name))
            if not tasks:
                raise ConfigInvalid(f"{name} must not be empty")
            for t in tasks:
                if t not in TASKS:
                    raise ConfigInvalid(f"{name}: unknown task {t!r}")
            object.__setattr__(self, name, tasks)
        if isinstance(self.bohb, dict):
            object.__setattr__(self, "bohb", BohbConfig(**self.bohb))
        if self.validation_episodes < 1 or self.test_episodes < 1 or self.top_k < 1:
            raise ConfigInvalid("episode counts and top_k must be >= 1")
        if not self.mu_spacing > 0:
            raise ConfigInvalid("mu_spacing must be positive")
        if self.drive not in (None, "omni", "diff"):
            raise ConfigInvalid(f"drive must be omni or diff, got {self.drive!r}")

    @property
    def tuning_budget(self) -> int:
        return int(round(self.test_budget if self.test_budget is not None else self.bohb.b_max))

    def to_dict(self) -> dict:
        out = asdict(self)
        for name in ("train_tasks", "val_tasks", "test_tasks"):
            out[name] = list(out[name])
        return out

    @classmethod
    def from_mapping(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        try:
            if "bohb" in data:
                data["bohb"] = BohbConfig(**(data["bohb"] or {}))
            return cls(**data)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigInvalid(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigInvalid(f"{path}: expected a mapping at the top level")
        return cls.from_mapping(data)

    def dump(self, path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        return path


def experiment_robot(config: ExperimentConfig):
    robot = load_robot(config.robot)
    return with_drive(robot, config.drive) if config.drive else robot


# ---------------------------------------------------------------------------
# evaluators (picklable, so rungs can run in worker processes)


class TaskEvaluator:
    """Validation success of a design after tuning its controller on ``budget`` episodes."""

    def __init__(self, robot, train_tasks, val_tasks, validation_episodes: int = 50):
        self.robot = robot
        self.train_tasks = tuple(train_tasks)
        self.val_tasks = tuple(val_tasks)
        self.validation_episodes = int(validation_episodes)

    def __call__(self, omega: DesignParams, budget: float, seed: int) -> dict:
        from .controller import score_design
        out = score_design(self.robot, omega, self.val_tasks, int(round(budget)),
                           seed=seed, validation_episodes=self.validation_episodes,
                           train_tasks=self.train_tasks)
        return out.to_dict()


def spacing_for(budget: float, b_max: float, eta: int, flat: bool = False) -> float:
    """Grid spacing standing in for a budget: coarser one rung down."""
    if flat:
        return SPACING_LEVELS[0]
    level = int(round(math.log(b_max / budget, eta))) if budget < b_max else 0
    return SPACING_LEVELS[min(max(level, 0), len(SPACING_LEVELS) - 1)]


def mu_score(mu: float) -> float:
    """Monotone map of mu >= 0 onto [0, 1), so it can stand in a record's score."""
    return mu / (1.0 + mu)


class ManipulabilityEvaluator:
    """Global manipulability of a design; infeasible designs score 0."""

    def __init__(self, robot, b_max: float, eta: int, flat: bool = False):
        self.robot = robot
        self.b_max = float(b_max)
        self.eta = int(eta)
        self.flat = bool(flat)

    def __call__(self, omega: DesignParams, budget: float, seed: int) -> dict:
        designed = apply_design(self.robot, omega)
        if not check_design(designed).feasible:
            return {"score": 0.0, "rates": {"manipulability": 0.0}, "feasible": False}
        spacing = spacing_for(budget, self.b_max, self.eta, self.flat)
        mu = global_manipulability(designed, WorkspaceGrid(spacing=spacing), rng_seed=seed).mu
        return {"score": mu_score(mu), "rates": {"manipulability": mu}, "feasible": True}


def make_evaluator(config: ExperimentConfig, robot=None):
    robot = robot or experiment_robot(config)
    if config.mode == "task":
        return TaskEvaluator(robot, config.train_tasks, config.val_tasks,
                             config.validation_episodes)
    return ManipulabilityEvaluator(robot, config.bohb.b_max, config.bohb.eta, config.flat)


# ---------------------------------------------------------------------------
# held-out testing


def test_design(robot, omega: DesignParams, label: str, config: ExperimentConfig) -> dict:
    """Tune on the training tasks, then count test successes; one test.jsonl record."""
    designed = apply_design(robot, omega)
    feasible = check_design(designed).feasible
    n = config.test_episodes
    rec = {"label": label, "omega": omega.to_dict(),
           "unit": [float(v) for v in encode_unit(omega)],
           "budget": config.tuning_budget, "seed": config.seed, "feasible": feasible,
           "episodes": n, "successes": {t: 0 for t in config.test_tasks}, "gains": None,
           "mu": 0.0}
    if feasible:
        tuned = tune_policy(designed, config.train_tasks, config.tuning_budget, seed=config.seed)
        eps = episodes_for(config.test_tasks, n, seed=config.seed + TEST_SEED_OFFSET)
        counts = success_counts(designed, eps, tuned.gains)
        rec["successes"] = {t: counts[t][0] for t in config.test_tasks}
        rec["gains"] = tuned.gains.to_dict()
        grid = WorkspaceGrid(spacing=config.mu_spacing)
        rec["mu"] = global_manipulability(designed, grid, rng_seed=config.seed).mu
    return rec


def ranked_designs(history) -> list:
    """Distinct designs evaluated at the largest budget, best first (ties: earliest)."""
    if not history:
        return []
    top = max(r.budget for r in history)
    seen, out = set(), []
    for r in sorted((r for r in history if r.budget == top), key=lambda r: (-r.score, r.index)):
        if r.unit not in seen:
            seen.add(r.unit)
            out.append(r)
    return out


def read_jsonl(path) -> list:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# statistics


def pearson(xs, ys) -> float:
    """Sample Pearson correlation."""
    xs, ys = [float(v) for v in xs], [float(v) for v in ys]
    if len(xs) != len(ys) or len(xs) < 2:
        raise DegenerateInput("pearson needs two equal-length sequences of >= 2 values")
    if statistics.pvariance(xs) == 0 or statistics.pvariance(ys) == 0:
        raise DegenerateInput("pearson is undefined for a constant sequence")
    r = statistics.correlation(xs, ys)
    return max(-1.0, min(1.0, r))


def binomial_se(successes: int, n: int) -> float:
    """Standard error of a success rate, in percentage points."""
    if n <= 0:
        return 0.0
    p = successes / n
    return 100.0 * math.sqrt(p * (1.0 - p) / n)


def format_rate(successes: int, n: int) -> str:
    """``30 ± 4.6`` style cell (percent, one-decimal standard error)."""
    pct = 100.0 * successes / n if n else 0.0
    return f"{pct:.0f} ± {binomial_se(successes, n):.1f}"


# ---------------------------------------------------------------------------
# report


@dataclass(frozen=True)
class TestRow:
    label: str
    omega: dict
    successes: dict
    episodes: int
    mu: float
    feasible: bool = True

    @property
    def rates(self) -> dict:
        return {t: k / self.episodes for t, k in self.successes.items()}

    @property
    def average(self) -> float:
        return statistics.fmean(self.rates.values()) if self.successes else 0.0

    @property
    def average_se(self) -> float:
        """Binomial error of the average, pooling every test episode."""
        total = self.episodes * len(self.successes)
        return binomial_se(sum(self.successes.values()), total) if total else 0.0


@dataclass(frozen=True)
class RankingReport:
    ranking: list            # EvaluationRecords, best first
    rows: list               # TestRows, tabletop first
    tasks: tuple
    correlation: float | None

    @property
    def best(self):
        return self.ranking[0] if self.ranking else None

    def row(self, label: str) -> TestRow | None:
        return next((r for r in self.rows if r.label == label), None)

    def to_dict(self) -> dict:
        return {
            "ranking": [{"index": r.index, "unit": list(r.unit), "omega": r.omega,
                         "budget": r.budget, "score": r.score} for r in self.ranking],
            "tests": [{"label": r.label, "omega": r.omega, "successes": r.successes,
                       "episodes": r.episodes, "average": r.average,
                       "average_se": r.average_se, "mu": r.mu, "feasible": r.feasible}
                      for r in self.rows],
            "tasks": list(self.tasks),
            "pearson_mu_success": self.correlation,
        }


def build_report(history, tests) -> RankingReport:
    rows = [TestRow(t["label"], t["omega"], dict(t["successes"]), int(t["episodes"]),
                    float(t["mu"]), bool(t.get("feasible", True))) for t in tests]
    rows.sort(key=lambda r: r.label != TABLETOP)
    tasks = tuple(t for t in TASKS if rows and t in rows[0].successes)
    r = None
    if len(rows) >= 2:
        try:
            r = pearson([x.mu for x in rows], [x.average for x in rows])
        except DegenerateInput:
            r = None
    return RankingReport(ranked_designs(history), rows, tasks, r)


def report(history_path, tests_path, out_dir) -> RankingReport:
    """Regenerate report.csv / report.txt / report.json from the JSONL files."""
    history = read_history(history_path) if Path(history_path).exists() else []
    rep = build_report(history, read_jsonl(tests_path) if tests_path else [])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(rep, out / "report.csv")
    (out / "report.txt").write_text(render_table(rep))
    (out / "report.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    return rep


def _write_csv(rep: RankingReport, path: Path):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        head = ["label"] + [f"{t}_pct" for t in rep.tasks] + [f"{t}_se" for t in rep.tasks]
        w.writerow(head + ["average_pct", "average_se", "mu"])
        for r in rep.rows:
            pct = [repr(100.0 * r.rates[t]) for t in rep.tasks]
            se = [repr(binomial_se(r.successes[t], r.episodes)) for t in rep.tasks]
            w.writerow([r.label] + pct + se
                       + [repr(100.0 * r.average), repr(r.average_se), repr(r.mu)])


def render_table(rep: RankingReport) -> str:
    """Markdown table; the best cell of every task column is bold."""
    cols = list(rep.tasks) + ["Average"]
    lines = ["| Model | " + " | ".join(cols) + " | mu |",
             "|---" * (len(cols) + 2) + "|"]
    best = {t: max((r.successes[t] for r in rep.rows), default=0) for t in rep.tasks}
    top_avg = max((r.average for r in rep.rows), default=0.0)
    for r in rep.rows:
        cells = []
        for t in rep.tasks:
            cell = format_rate(r.successes[t], r.episodes)
            cells.append(f"**{cell}**" if r.successes[t] == best[t] and len(rep.rows) > 1 else cell)
        avg = f"{100 * r.average:.1f} ± {r.average_se:.1f}"
        cells.append(f"**{avg}**" if r.average == top_avg and len(rep.rows) > 1 else avg)
        lines.append(f"| {r.label} | " + " | ".join(cells) + f" | {r.mu:.3f} |")
    out = "\n".join(lines) + "\n"
    if rep.correlation is not None:
        out += f"\nPearson r (mu vs average success): {rep.correlation:.3f}\n"
    if rep.best is not None:
        out += (f"\nBest design (score {rep.best.score:.3f} at budget {rep.best.budget:g}): "
                + ", ".join(f"{k}={v:.4f}" for k, v in (rep.best.omega or {}).items()) + "\n")
    return out


# ---------------------------------------------------------------------------
# the whole pipeline


def run_experiment(config: ExperimentConfig, *, resume_from=None, workers=None) -> RankingReport:
    """Optimise, test the top designs and the tabletop mount, write the report."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.dump(out / "config.yaml")
    robot = experiment_robot(config)
    history_path = out / "history.jsonl"
    result = optimize(DesignSpace.default(), make_evaluator(config, robot), config.bohb,
                      config.seed, history_path=history_path, resume_from=resume_from,
                      workers=workers)
    tests_path = out / "test.jsonl"
    tests_path.write_text("")
    if result.history:
        picks = [(TABLETOP, DesignParams())]
        for k, rec in enumerate(ranked_designs(result.history)[:config.top_k]):
            picks.append((f"Rank {k + 1}", DesignParams(**rec.omega)))
        for label, omega in picks:
            rec = test_design(robot, omega, label, config)
            with tests_path.open("a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return report(history_path, tests_path, out)


__all__ = [
    "ExperimentConfig", "TaskEvaluator", "ManipulabilityEvaluator", "RankingReport", "TestRow",
    "run_experiment", "report", "pearson", "binomial_se", "format_rate", "spacing_for",
    "ranked_designs", "test_design",
]
