"""Few-shot evaluation over sampled tasks and the cross-shot testing protocol."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from metashot.episodes import EpisodeSpec, sample_episode
from metashot.errors import ConfigError, DatasetError, StageError
from metashot.metalearn.engine import adapt_and_predict

SHOTS = (1, 3, 5, 7, 9)
CSV_HEADER = ["train_shots"] + [f"test_{j}" for j in SHOTS]


@dataclass(frozen=True)
class EvalReport:
    accuracies: tuple = field(repr=False)
    mean: float
    ci95: float

    @property
    def task_count(self):
        return len(self.accuracies)

    def to_dict(self):
        return {
            "task_count": self.task_count,
            "mean": self.mean,
            "ci95": self.ci95,
            "accuracies": list(self.accuracies),
        }


def summarize(accuracies):
    """Mean and 95% half-width 1.96 * s / sqrt(T), s with Bessel's correction."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.ndim != 1 or acc.size == 0:
        raise ConfigError("need a non-empty 1-d sequence of accuracies")
    if np.any(acc < 0) or np.any(acc > 1):
        raise ConfigError("accuracies must lie in [0, 1]")
    mean = float(acc.mean())
    if acc.size < 2:
        return EvalReport(tuple(acc.tolist()), mean, 0.0)
    s = float(acc.std(ddof=1))
    return EvalReport(tuple(acc.tolist()), mean, 1.96 * s / math.sqrt(acc.size))


class ModelPredictor:
    """Adapts on the support set, then scores the query set (no dropout)."""

    def __init__(self, learner, params, alpha, inner_cfg):
        self.learner = learner
        self.params = params
        self.alpha = alpha
        self.inner_cfg = inner_cfg

    def __call__(self, episode):
        return adapt_and_predict(self.learner, self.params, self.alpha, episode, self.inner_cfg)


class OraclePredictor:
    """Test stub that reads the query labels and is therefore always right."""

    def __call__(self, episode):
        logits = np.zeros((len(episode.query_y), episode.ways))
        logits[np.arange(len(episode.query_y)), episode.query_y] = 1.0
        return logits


def task_rng(seed, t):
    # one independent stream per task index, so tasks can run in any order
    return np.random.default_rng([int(seed), int(t)])


def evaluate_tasks(predictor, handle, spec, task_count=600, seed=0, threads=1):
    """Per-task query accuracies, in task-index order regardless of ``threads``."""
    if task_count < 1:
        raise ConfigError("task_count must be >= 1")

    def one(t):
        ep = sample_episode(handle, spec, task_rng(seed, t), t)
        logits = np.asarray(predictor(ep))
        if logits.shape != (len(ep.query_y), spec.ways):
            raise DatasetError(f"predictor returned logits of shape {logits.shape}")
        return float(np.mean(np.argmax(logits, axis=1) == ep.query_y))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, range(task_count)))
    return [one(t) for t in range(task_count)]


def evaluate_model(learner, params, alpha, handle, spec, inner_cfg, task_count=600, seed=0, threads=1):
    if params is not None and "c.fc1.w" in params:
        out = params["c.fc2.w"] if "c.fc2.w" in params else params["c.fc1.w"]
        if out.shape[1] != spec.ways:
            raise ConfigError(f"classifier has {out.shape[1]} outputs, episodes are {spec.ways}-way")
    predictor = ModelPredictor(learner, params, alpha, inner_cfg)
    return summarize(evaluate_tasks(predictor, handle, spec, task_count, seed, threads))


class AccuracyMatrix:
    """a[K][J]: accuracy (percent) of the K-shot-trained model on J-shot tasks."""

    def __init__(self, values, shots=SHOTS):
        values = np.array(values, dtype=np.float64)
        n = len(shots)
        if values.shape != (n, n):
            raise ValueError(f"accuracy matrix must be {n}x{n}, got {values.shape}")
        if np.any(~np.isfinite(values)) or np.any(values < 0) or np.any(values > 100):
            raise ValueError("accuracy entries must lie in [0, 100]")
        self.values = values
        self.shots = tuple(shots)

    def __eq__(self, other):
        return isinstance(other, AccuracyMatrix) and self.shots == other.shots and np.array_equal(
            self.values, other.values
        )

    def entry(self, k, j):
        return float(self.values[self.shots.index(k), self.shots.index(j)])

    def test_vector(self, j):
        """a_J: accuracies on J-shot tasks across the trained models."""
        return self.values[:, self.shots.index(j)].copy()

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["train_shots"] + [f"test_{j}" for j in self.shots])
        for k, row in zip(self.shots, self.values):
            w.writerow([k] + [f"{v:.2f}" for v in row])
        return buf.getvalue()

    def save(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text):
        rows = [r for r in csv.reader(io.StringIO(text)) if r]
        if not rows or [h.strip() for h in rows[0]] != CSV_HEADER:
            raise DatasetError("accuracy matrix CSV must start with header " + ",".join(CSV_HEADER))
        body = rows[1:]
        if [r[0].strip() for r in body] != [str(k) for k in SHOTS]:
            raise DatasetError("accuracy matrix CSV needs rows keyed 1,3,5,7,9 in order")
        try:
            values = [[float(v) for v in r[1:]] for r in body]
        except ValueError as exc:
            raise DatasetError(f"bad number in accuracy matrix CSV: {exc}") from None
        if any(len(r) != len(SHOTS) for r in values):
            raise DatasetError("every accuracy matrix row needs five entries")
        try:
            return cls(values)
        except ValueError as exc:
            raise DatasetError(str(exc)) from None

    @classmethod
    def load(cls, path):
        with open(path, newline="") as fh:
            return cls.from_csv(fh.read())


def cross_test(predictors, handle, ways=5, queries=15, task_count=600, seed=0, threads=1, shots=SHOTS):
    """Evaluate each K-shot-trained predictor on J-shot tasks for every J.

    ``predictors`` maps K to a callable episode -> logits (e.g. a
    ModelPredictor). Entries are percentages rounded to two decimals.
    """
    for k in shots:
        if predictors.get(k) is None:
            raise StageError(f"no trained state for K={k}")
    values = np.zeros((len(shots), len(shots)))
    for a, k in enumerate(shots):
        for b, j in enumerate(shots):
            spec = EpisodeSpec(ways, j, queries)
            accs = evaluate_tasks(predictors[k], handle, spec, task_count, seed, threads)
            values[a, b] = round(100.0 * float(np.mean(accs)), 2)
    return AccuracyMatrix(values, shots)
