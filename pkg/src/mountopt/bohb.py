"""Hyperband brackets with Parzen-density suggestions over the unit cube.

Scores are maximised.  Every evaluation becomes an ``EvaluationRecord``;
the history is append-only and, written as JSON lines, it is enough to
replay a run without calling the evaluator again.
"""
from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp
from scipy.stats import truncnorm
from sklearn.base import BaseEstimator

from .exceptions import ConfigInvalid, EvaluationFailed, ResumeMismatch, ValidationError
from .robot import DesignSpace, decode_unit

PROVENANCES = ("random", "model", "promoted")
WORKERS_ENV = "MOUNTOPT_WORKERS"


@dataclass(frozen=True)
class BohbConfig:
    eta: int = 3
    b_min: float = 32.0
    b_max: float = 96.0
    random_fraction: float = 1 / 3
    iterations: int = 20
    max_designs: int = 60
    gamma: float = 0.15
    candidates: int = 64
    min_points: int | None = None     # None: dimension + 1
    min_bandwidth: float = 1e-3
    prior_weight: float = 1.0       # pseudo-points of a uniform component
    bandwidth_factor: float = 3.0     # candidate draws use widened good-model kernels
    budget_unit: str = "episodes"

    def __post_init__(self):
        if isinstance(self.eta, bool) or int(self.eta) != self.eta or self.eta < 2:
            raise ConfigInvalid(f"eta must be an integer >= 2, got {self.eta}")
        if not (0 < self.b_min <= self.b_max) or not math.isfinite(self.b_max):
            raise ConfigInvalid(f"need 0 < b_min <= b_max, got {self.b_min}, {self.b_max}")
        if not (0.0 <= self.random_fraction <= 1.0):
            raise ConfigInvalid("random_fraction must lie in [0, 1]")
        if not (0.0 < self.gamma < 1.0):
            raise ConfigInvalid("gamma must lie in (0, 1)")
        if self.iterations < 1 or self.max_designs < 1 or self.candidates < 1:
            raise ConfigInvalid("iterations, max_designs and candidates must be >= 1")
        if self.min_points is not None and self.min_points < 2:
            raise ConfigInvalid("min_points must be at least 2")
        if not self.min_bandwidth > 0:
            raise ConfigInvalid("min_bandwidth must be positive")
        if not self.bandwidth_factor >= 1:
            raise ConfigInvalid("bandwidth_factor must be at least 1")
        object.__setattr__(self, "eta", int(self.eta))

    @property
    def s_max(self) -> int:
        # integer search avoids log() landing just below a whole number
        s = 0
        while self.b_max / self.eta ** (s + 1) >= self.b_min * (1 - 1e-12):
            s += 1
        return s

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# density model


class ParzenDensity(BaseEstimator):
    """Product of per-dimension Gaussians truncated to [0, 1], one per point.

    Bandwidths follow Scott's rule (sample std times n^(-1/(d+4))) and are
    floored at ``min_bandwidth``.  Each kernel is renormalised on the cube,
    so the mixture integrates to exactly one there.  ``prior_weight`` adds
    that many pseudo-points of the uniform density on the cube.
    """

    def __init__(self, min_bandwidth: float = 1e-3, prior_weight: float = 0.0):
        self.min_bandwidth = min_bandwidth
        self.prior_weight = prior_weight

    def fit(self, X, y=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[0] < 1:
            raise ValidationError("cannot fit a density to zero points")
        if np.any(X < 0) or np.any(X > 1):
            raise ValidationError("points must lie in the unit cube")
        n, d = X.shape
        std = X.std(axis=0, ddof=1) if n > 1 else np.zeros(d)
        self.bandwidth_ = np.maximum(std * n ** (-1.0 / (d + 4)), self.min_bandwidth)
        self.data_ = X
        # standardised truncation limits of every kernel
        self._a = -X / self.bandwidth_
        self._b = (1.0 - X) / self.bandwidth_
        return self

    def score_samples(self, X) -> np.ndarray:
        """Log density at each row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.data_.shape[1]:
            raise ValidationError("dimension differs from the fitted data")
        z = truncnorm.logpdf(X[:, None, :], self._a[None], self._b[None],
                             loc=self.data_[None], scale=self.bandwidth_)
        log_k = logsumexp(z.sum(axis=2), axis=1)
        if self.prior_weight > 0:
            # uniform density on the cube is 1, so its log term is log(weight)
            log_k = np.logaddexp(log_k, math.log(self.prior_weight))
        return log_k - math.log(self.data_.shape[0] + self.prior_weight)

    def sample(self, n: int, random_state=None, widen: float = 1.0) -> np.ndarray:
        """Draws from the mixture, optionally with every bandwidth scaled by ``widen``."""
        rng = np.random.default_rng(random_state)
        idx = rng.integers(0, self.data_.shape[0], size=n)
        h = self.bandwidth_ * widen
        mu = self.data_[idx]
        out = truncnorm.rvs(-mu / h, (1.0 - mu) / h, loc=mu, scale=h, random_state=rng)
        if self.prior_weight > 0:
            n_data = self.data_.shape[0]
            flat = rng.random(n) < self.prior_weight / (n_data + self.prior_weight)
            out[flat] = rng.random((int(flat.sum()), self.data_.shape[1]))
        return out


@dataclass(frozen=True)
class DensityPair:
    good: ParzenDensity
    bad: ParzenDensity
    budget: float
    good_index: tuple
    bad_index: tuple

    def log_ratio(self, X) -> np.ndarray:
        return self.good.score_samples(X) - self.bad.score_samples(X)


def fit_densities(units, scores, budgets, config: BohbConfig, dim: int) -> DensityPair | None:
    """Good/bad models at the highest budget holding enough observations."""
    units = np.asarray(units, dtype=float).reshape(-1, dim)
    scores = np.asarray(scores, dtype=float)
    budgets = np.asarray(budgets, dtype=float)
    need = config.min_points or dim + 1
    for b in sorted(set(budgets.tolist()), reverse=True):
        idx = np.flatnonzero(budgets == b)
        if len(idx) < need:
            continue
        order = idx[np.argsort(-scores[idx], kind="stable")]
        n_good = min(math.ceil(config.gamma * len(idx)), len(idx) - 1)
        good, bad = order[:n_good], order[n_good:]
        make = ParzenDensity(config.min_bandwidth, config.prior_weight)
        return DensityPair(make.fit(units[good]),
                           ParzenDensity(**make.get_params()).fit(units[bad]),
                           float(b), tuple(map(int, good)), tuple(map(int, bad)))
    return None


def suggest(units, scores, budgets, config: BohbConfig, rng, dim: int = 6) -> tuple:
    """Next point to evaluate and how it was chosen ('random' or 'model')."""
    if rng.random() < config.random_fraction:
        return rng.random(dim), "random"
    pair = fit_densities(units, scores, budgets, config, dim) if len(scores) else None
    if pair is None:
        return rng.random(dim), "random"
    cand = pair.good.sample(config.candidates, rng, config.bandwidth_factor)
    best = int(np.argmax(pair.log_ratio(cand)))
    return np.clip(cand[best], 0.0, 1.0), "model"


# ---------------------------------------------------------------------------
# Hyperband geometry


def halving_counts(n0: int, eta: int, rungs: int) -> tuple:
    """Configs per rung: floor(n_i / eta), except that a lone config goes on."""
    if n0 < 1 or rungs < 1:
        raise ConfigInvalid("need at least one config and one rung")
    counts = [int(n0)]
    for _ in range(rungs - 1):
        counts.append(max(1, counts[-1] // eta))
    return tuple(counts)


@dataclass(frozen=True)
class Bracket:
    s: int
    budgets: tuple
    counts: tuple

    def __post_init__(self):
        if len(self.budgets) != self.s + 1 or len(self.counts) != self.s + 1:
            raise ConfigInvalid("a bracket has s + 1 rungs")


def make_brackets(config: BohbConfig) -> list:
    """Hyperband brackets from s_max down to 0."""
    eta, s_max = config.eta, config.s_max
    out = []
    for s in range(s_max, -1, -1):
        n = -(-(s_max + 1) * eta ** s // (s + 1))
        budgets = tuple(config.b_max * float(eta) ** (i - s) for i in range(s + 1))
        out.append(Bracket(s, budgets, halving_counts(n, eta, s + 1)))
    return out


# ---------------------------------------------------------------------------
# records and history files


@dataclass(frozen=True)
class EvaluationRecord:
    index: int
    unit: tuple
    budget: float
    seed: int
    score: float
    provenance: str
    sweep: int = 0
    bracket: int = 0
    rung: int = 0
    omega: dict | None = None
    rates: dict = field(default_factory=dict)
    feasible: bool = True
    gains: dict | None = None
    wall_time: float = field(default=0.0, compare=False)

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValidationError(f"score {self.score} outside [0, 1]")
        if self.provenance not in PROVENANCES:
            raise ValidationError(f"unknown provenance {self.provenance!r}")

    def to_json(self) -> str:
        """One JSON line; wall time is left out so reruns are byte-identical."""
        data = asdict(self)
        data.pop("wall_time")
        return json.dumps(data, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "EvaluationRecord":
        data = json.loads(line)
        data["unit"] = tuple(data["unit"])
        return cls(**data)


def read_history(path) -> list:
    """Records from a JSONL file; a torn last line (crash mid-write) is dropped."""
    lines = Path(path).read_text().splitlines()
    out = []
    for k, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            out.append(EvaluationRecord.from_json(line))
        except (json.JSONDecodeError, TypeError, KeyError):
            if k == len(lines) - 1:
                break
            raise
    return out


class HistoryWriter:
    """Append-only JSONL, flushed per record, with wall times in a sidecar."""

    def __init__(self, path, prefix=()):
        self.path = Path(path)
        self.times = self.path.with_name(self.path.name + ".times")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w") as fh:
            for rec in prefix:
                fh.write(rec.to_json() + "\n")
        old = self.times.read_text().splitlines() if self.times.exists() else []
        with open(self.times, "w") as fh:
            fh.writelines(t + "\n" for t in old[:len(prefix)])

    def write(self, rec: EvaluationRecord):
        with open(self.path, "a") as fh:
            fh.write(rec.to_json() + "\n")
            fh.flush()
        with open(self.times, "a") as fh:
            fh.write(f"{rec.wall_time:.6f}\n")


# ---------------------------------------------------------------------------
# the optimiser


def _worker_count(workers) -> int:
    if workers is None:
        workers = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(workers))
    except ValueError:
        raise ConfigInvalid(f"{WORKERS_ENV} must be an integer, got {workers!r}") from None


def _call(evaluator, point, budget, seed):
    t0 = time.perf_counter()
    out = evaluator(point, budget, seed)
    return out, time.perf_counter() - t0


def _outcome(out) -> dict:
    if isinstance(out, (int, float, np.floating, np.integer)):
        return {"score": float(out)}
    if hasattr(out, "to_dict"):
        out = out.to_dict()
    keep = ("score", "rates", "feasible", "gains")
    return {k: out[k] for k in keep if k in out}


@dataclass(frozen=True)
class OptimizeResult:
    best: EvaluationRecord | None
    history: list

    @property
    def max_budget(self) -> float | None:
        return max((r.budget for r in self.history), default=None)


def best_record(history) -> EvaluationRecord | None:
    """Highest score at the largest budget seen; ties go to the earliest."""
    if not history:
        return None
    top = max(r.budget for r in history)
    best = None
    for r in history:
        if r.budget == top and (best is None or r.score > best.score):
            best = r
    return best


class Bohb:
    """Runs brackets against an evaluator ``(design, budget, seed) -> score``.

    ``space`` is a ``DesignSpace`` (the evaluator then receives
    ``DesignParams``) or an integer dimension (it receives the unit vector).
    Every evaluation uses the run seed, so designs are compared on the same
    episodes.  Suggestions for a rung are drawn before any of its
    evaluations, which keeps results independent of the worker count.
    """

    def __init__(self, space, evaluator, config: BohbConfig | None = None, seed: int = 0,
                 history_path=None, replay=(), workers=None):
        self.space = space
        self.dim = space.dim if isinstance(space, DesignSpace) else int(space)
        self.evaluator = evaluator
        self.config = config or BohbConfig()
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self.history: list = []
        self.replay = list(replay)
        self.workers = _worker_count(workers)
        self.writer = HistoryWriter(history_path, self.replay) if history_path else None

    # -- plumbing -----------------------------------------------------------

    def _point(self, u):
        return decode_unit(u, self.space) if isinstance(self.space, DesignSpace) else np.array(u)

    def _omega(self, u):
        return decode_unit(u, self.space).to_dict() if isinstance(self.space, DesignSpace) else None

    def _run(self, jobs):
        """Evaluate (unit, budget) jobs; replayed ones come from the old history."""
        fresh = []
        for k, (u, b) in enumerate(jobs):
            i = len(self.history) + k
            if i < len(self.replay):
                old = self.replay[i]
                if old.budget != b or not np.array_equal(np.asarray(old.unit), u):
                    raise ResumeMismatch(f"record {i} differs from the schedule being replayed")
            else:
                fresh.append(k)
        results = {}
        if fresh:
            args = [(self._point(jobs[k][0]), jobs[k][1]) for k in fresh]
            try:
                if self.workers > 1 and len(args) > 1:
                    with ProcessPoolExecutor(self.workers) as pool:
                        futs = [pool.submit(_call, self.evaluator, p, b, self.seed) for p, b in args]
                        done = [f.result() for f in futs]
                else:
                    done = [_call(self.evaluator, p, b, self.seed) for p, b in args]
            except Exception as exc:  # noqa: BLE001 - re-raised with the design attached
                bad = [p for p, _ in args]
                raise EvaluationFailed(bad if len(bad) > 1 else bad[0], exc) from exc
            results = dict(zip(fresh, done))
        return results

    def _evaluate_rung(self, units, budget, provenance, sweep, bracket, rung):
        jobs = [(np.asarray(u, dtype=float), float(budget)) for u in units]
        done = self._run(jobs)
        out = []
        for k, (u, b) in enumerate(jobs):
            i = len(self.history)
            if k in done:
                res, wall = done[k]
                rec = EvaluationRecord(i, tuple(map(float, u)), b, self.seed, provenance=provenance[k],
                                       sweep=sweep, bracket=bracket, rung=rung,
                                       omega=self._omega(u), wall_time=wall, **_outcome(res))
                if self.writer:
                    self.writer.write(rec)
            else:
                rec = self.replay[i]
            self.history.append(rec)
            out.append(rec)
        return out

    def _suggest_many(self, n):
        hist = self.history
        units = [r.unit for r in hist]
        scores = [r.score for r in hist]
        budgets = [r.budget for r in hist]
        picks = [suggest(units, scores, budgets, self.config, self.rng, self.dim) for _ in range(n)]
        return [p[0] for p in picks], [p[1] for p in picks]

    @property
    def remaining(self) -> int:
        return self.config.max_designs - len(self.history)

    # -- Hyperband ------------------------------------------------------------

    def run_bracket(self, bracket: Bracket, sweep: int = 0) -> list:
        """Successive halving through one bracket; stops early at the design cap."""
        eta = self.config.eta
        n = min(bracket.counts[0], self.remaining)
        if n <= 0:
            return []
        units, prov = self._suggest_many(n)
        rung = self._evaluate_rung(units, bracket.budgets[0], prov, sweep, bracket.s, 0)
        records = list(rung)
        for i in range(1, bracket.s + 1):
            k = min(max(1, len(rung) // eta), self.remaining)
            if k <= 0:
                break
            # stable sort: equal scores keep insertion order
            keep = sorted(rung, key=lambda r: -r.score)[:k]
            keep.sort(key=lambda r: r.index)
            rung = self._evaluate_rung([r.unit for r in keep], bracket.budgets[i],
                                       ["promoted"] * k, sweep, bracket.s, i)
            records += rung
        return records

    def optimize(self) -> OptimizeResult:
        brackets = make_brackets(self.config)
        for sweep in range(self.config.iterations):
            for br in brackets:
                if self.remaining <= 0:
                    return OptimizeResult(best_record(self.history), list(self.history))
                self.run_bracket(br, sweep)
        return OptimizeResult(best_record(self.history), list(self.history))


def run_bracket(bracket: Bracket, evaluator, config: BohbConfig | None = None, *,
                dim: int = 6, seed: int = 0, history=None) -> list:
    """One bracket against ``evaluator``; records are appended to ``history``."""
    opt = Bohb(dim, evaluator, config, seed)
    if history is not None:
        opt.history = history
    return opt.run_bracket(bracket)


def optimize(space, evaluator, config: BohbConfig | None = None, seed: int = 0, *,
             history_path=None, resume_from=None, workers=None) -> OptimizeResult:
    """Full run; with ``resume_from`` the recorded evaluations are replayed, not re-run."""
    replay = read_history(resume_from) if resume_from else ()
    return Bohb(space, evaluator, config, seed, history_path, replay, workers).optimize()


def random_search(dim: int, evaluator, n: int, seed: int = 0, budget: float = 1.0) -> list:
    """Baseline: ``n`` uniform points, returned as (unit, score) pairs."""
    rng = np.random.default_rng(seed)
    return [(u, float(evaluator(u, budget, seed))) for u in rng.random((n, dim))]

