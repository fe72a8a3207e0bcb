"""Experiment protocols: sequential training, lambda sweeps and pruning curves."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from ._validation import check_fraction
from .data import load_corpus, make_sequence
from .estimator import ElasticWeightConsolidation
from .exceptions import NonFiniteError
from .importance import importance_spread

logger = logging.getLogger(__name__)

PRUNE_CRITERIA = ("magnitude", "fisher", "mas", "si", "total_abs_signal")

RUNS_HEADER = ["method", "penalty", "lambda", "seed", "average_accuracy", "failed", "per_task_accuracy"]
SWEEP_HEADER = ["method", "penalty", "lambda", "mean_accuracy", "ci_halfwidth", "n_runs", "n_failed"]
PRUNE_HEADER = ["criterion", "fraction", "mean_accuracy", "ci_halfwidth", "n_runs"]


def mean_ci(samples, significance=0.95):
    """Mean and Student-t confidence half-width ``t * s / sqrt(n)``."""
    x = np.asarray(samples, dtype=np.float64)
    n = x.size
    if n < 2:
        raise ValueError("need at least two samples for a confidence interval")
    if np.all(x == x[0]):
        return float(x[0]), 0.0
    mean = float(x.mean())
    s = float(x.std(ddof=1))
    t = float(stats.t.ppf(0.5 + significance / 2.0, n - 1))
    return mean, t * s / math.sqrt(n)


@dataclass
class RunConfig:
    """One sequential-training run. Defaults follow the reference protocol."""

    task_sequence: str = "permuted-mnist-10"
    n_tasks: int | None = None
    first_identity: bool = False
    method: str = "mas"
    fisher_mode: str = "label"
    penalty: str = "original"
    ewc_lambda: float = 1.0
    epochs: int = 6
    batch_size: int = 100
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    n_importance_samples: int | None = None
    n_train: int | None = None
    n_test: int | None = None
    hidden_layer_sizes: tuple = (300, 150)
    clip_norm: float | None = None
    clip_scope: str = "combined"
    si_damping: float = 0.1
    seed: int = 0
    data_dir: str | None = None

    @property
    def network(self):
        return "conv" if self.task_sequence.startswith("rotated") else "dense"

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hidden_layer_sizes"] = list(self.hidden_layer_sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown config keys: {', '.join(unknown)}")
        d = dict(d)
        if "hidden_layer_sizes" in d:
            d["hidden_layer_sizes"] = tuple(d["hidden_layer_sizes"])
        return cls(**d)

    def estimator(self):
        return ElasticWeightConsolidation(
            network=self.network,
            hidden_layer_sizes=self.hidden_layer_sizes,
            importance=self.method,
            penalty=self.penalty,
            ewc_lambda=self.ewc_lambda,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            fisher_mode=self.fisher_mode,
            n_importance_samples=self.n_importance_samples,
            si_damping=self.si_damping,
            clip_norm=self.clip_norm,
            clip_scope=self.clip_scope,
            random_state=self.seed,
        )


@dataclass
class RunResult:
    per_task_accuracy: list
    average_accuracy: float
    seed: int
    wall_time: float = 0.0
    failed: bool = False
    error: str = ""
    config: dict = field(default_factory=dict)


def _split(cfg, source, split):
    ds = load_corpus(source, split, cfg.data_dir)
    n = cfg.n_train if split == "train" else cfg.n_test
    return ds.subset(n)


def run_sequential(cfg, checkpoint_dir=None, verbose=False):
    """Train on every task in order, then measure test accuracy on all of them."""
    t0 = time.perf_counter()
    seq = make_sequence(cfg.task_sequence, cfg.seed, cfg.n_tasks, cfg.first_identity)
    est = cfg.estimator()
    try:
        for k, task in enumerate(seq):
            train = _split(cfg, task.source, "train")
            est.partial_fit(train.images, train.labels, input_transform=task)
            if verbose and est.importance_ is not None:
                logger.info("task %d importance spread %s", k, importance_spread(est.network_, est.importance_))
            if checkpoint_dir is not None:
                _checkpoint(est, Path(checkpoint_dir) / f"task_{k:02d}")
    except NonFiniteError as exc:
        logger.warning("run seed=%d diverged: %s", cfg.seed, exc)
        return RunResult([], float("nan"), cfg.seed, time.perf_counter() - t0, True, str(exc), cfg.to_dict())
    accs = []
    for task in seq:
        test = _split(cfg, task.source, "test")
        accs.append(est.score(test.images, test.labels, input_transform=task))
    return RunResult(accs, float(np.mean(accs)), cfg.seed, time.perf_counter() - t0, config=cfg.to_dict())


def _checkpoint(est, directory):
    directory.mkdir(parents=True, exist_ok=True)
    net = est.network_
    net.params.astype("<f8").tofile(directory / "params.bin")
    if est.consolidated_ is not None:
        est.consolidated_.save(directory / "consolidated", net.fingerprint())


def run_many(configs, jobs=1):
    """Run configs, in parallel when ``jobs > 1``; results keep input order."""
    configs = list(configs)
    if jobs <= 1 or len(configs) <= 1:
        return [run_sequential(c) for c in configs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_sequential, configs))


# --------------------------------------------------------------------------
# lambda sweep
# --------------------------------------------------------------------------


@dataclass
class SweepPoint:
    ewc_lambda: float
    mean_accuracy: float
    ci_halfwidth: float
    n_runs: int
    n_failed: int = 0
    accuracies: list = field(default_factory=list)

    @property
    def valid(self):
        return self.n_runs - self.n_failed > 0


@dataclass
class SweepResult:
    method: str
    penalty: str
    points: list
    runs: list = field(default_factory=list)

    @property
    def best_lambda(self):
        valid = [p for p in self.points if p.valid and not math.isnan(p.mean_accuracy)]
        if not valid:
            return None
        return max(valid, key=lambda p: p.mean_accuracy).ewc_lambda


def aggregate_point(ewc_lambda, results, significance=0.95):
    ok = [r.average_accuracy for r in results if not r.failed]
    n_failed = len(results) - len(ok)
    if n_failed:
        logger.info("lambda=%g: %d of %d runs diverged", ewc_lambda, n_failed, len(results))
    if len(ok) >= 2:
        mean, half = mean_ci(ok, significance)
    elif len(ok) == 1:
        mean, half = ok[0], float("nan")
    else:
        mean, half = float("nan"), float("nan")
    return SweepPoint(ewc_lambda, mean, half, len(results), n_failed, ok)


def sweep_lambda(base_cfg, lambda_grid, n_runs, seed_base=None, jobs=1):
    """Evaluate every lambda with ``n_runs`` seeds (``seed_base + run_index``)."""
    lambda_grid = list(lambda_grid)
    if not lambda_grid:
        raise ValueError("lambda grid is empty")
    if n_runs < 2:
        raise ValueError("n_runs must be >= 2")
    seed_base = base_cfg.seed if seed_base is None else seed_base
    configs = [
        base_cfg.replace(ewc_lambda=float(lam), seed=seed_base + r)
        for lam in lambda_grid
        for r in range(n_runs)
    ]
    results = run_many(configs, jobs)
    points, runs = [], []
    for i, lam in enumerate(lambda_grid):
        chunk = results[i * n_runs : (i + 1) * n_runs]
        runs += [(float(lam), r) for r in chunk]
        points.append(aggregate_point(float(lam), chunk))
    return SweepResult(base_cfg.method, base_cfg.penalty, points, runs)


# --------------------------------------------------------------------------
# pruning
# --------------------------------------------------------------------------


def prune_mask(scores, weight_mask, fraction, param_index=None, per_layer=False):
    """Boolean mask of the weights with the smallest scores.

    ``round(fraction * n_weights)`` weights are selected globally, or per
    layer when ``per_layer`` is set (``param_index`` required). Biases are
    never selected. Ties break by parameter index.
    """
    fraction = check_fraction(fraction)
    mask = np.zeros(scores.size, dtype=bool)
    groups = [np.flatnonzero(weight_mask)]
    if per_layer:
        groups = []
        for off, n in param_index.values():
            idx = np.flatnonzero(weight_mask[off : off + n]) + off
            groups.append(idx)
    for idx in groups:
        k = int(round(fraction * idx.size))
        if k:
            order = np.argsort(scores[idx], kind="stable")
            mask[idx[order[:k]]] = True
    return mask


def prune_and_eval(net, scores, fractions, X, y, per_layer=False, input_transform=None):
    """Accuracy after zeroing each fraction of weights; ``net`` is restored afterwards."""
    saved = net.params.copy()
    wmask = net.weight_mask()
    accs = []
    try:
        for p in fractions:
            net.params[:] = saved
            net.params[prune_mask(scores, wmask, p, net.param_index, per_layer)] = 0.0
            xb = X if input_transform is None else input_transform(X)
            pred = net.predict(xb.reshape((-1,) + net.input_shape))
            accs.append(float(np.mean(pred == y)))
    finally:
        net.params[:] = saved
    return accs


@dataclass
class PruneCurve:
    criterion: str
    fractions: list
    mean_accuracy: list
    ci_halfwidth: list
    accuracies: list = field(default_factory=list)  # [run][fraction]

    @property
    def points(self):
        return list(zip(self.fractions, self.mean_accuracy, self.ci_halfwidth))


def criterion_scores(est, X, y, criterion):
    """Per-parameter pruning scores for a single-task trained estimator."""
    if criterion == "magnitude":
        return np.abs(est.network_.params)
    if criterion == "si":
        return est.importance_.omega
    return est.estimate_importance(X, y, criterion).omega


def _prune_run(args):
    cfg, criteria, fractions, per_layer = args
    # SI needs the training trajectory; lambda 0 keeps training unpenalised
    est = cfg.replace(method="si", penalty="original", ewc_lambda=0.0).estimator()
    train = _split(cfg, "mnist", "train")
    test = _split(cfg, "mnist", "test")
    est.fit(train.images, train.labels)
    out = {}
    for c in criteria:
        scores = criterion_scores(est, train.images, train.labels, c)
        out[c] = prune_and_eval(est.network_, scores, fractions, test.images, test.labels, per_layer)
    return out


def run_pruning(base_cfg, criteria=PRUNE_CRITERIA, fractions=(0.0, 0.2, 0.4, 0.6, 0.8, 0.9, 1.0),
                n_runs=10, seed_base=None, jobs=1, per_layer=False):
    """Pruning-degradation curves on a net trained on plain MNIST, one net per seed."""
    fractions = [check_fraction(f) for f in fractions]
    for c in criteria:
        if c not in PRUNE_CRITERIA:
            raise ValueError(f"unknown pruning criterion {c!r}")
    seed_base = base_cfg.seed if seed_base is None else seed_base
    args = [(base_cfg.replace(seed=seed_base + r), tuple(criteria), fractions, per_layer) for r in range(n_runs)]
    if jobs > 1 and n_runs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_run = list(pool.map(_prune_run, args))
    else:
        per_run = [_prune_run(a) for a in args]
    curves = []
    for c in criteria:
        acc = np.array([r[c] for r in per_run])
        means, halves = [], []
        for j in range(len(fractions)):
            if n_runs >= 2:
                m, h = mean_ci(acc[:, j])
            else:
                m, h = float(acc[0, j]), float("nan")
            means.append(m)
            halves.append(h)
        curves.append(PruneCurve(c, fractions, means, halves, acc.tolist()))
    return curves


# --------------------------------------------------------------------------
# result files
# --------------------------------------------------------------------------


def _fmt(x):
    return repr(float(x))


def write_runs_csv(path, rows):
    """``rows`` is an iterable of (method, penalty, lambda, RunResult)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUNS_HEADER)
        for method, penalty, lam, r in rows:
            w.writerow([method, penalty, _fmt(lam), r.seed, _fmt(r.average_accuracy), int(r.failed),
                        ";".join(_fmt(a) for a in r.per_task_accuracy)])


def write_sweep_csv(path, sweeps):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for sw in sweeps:
            for p in sw.points:
                w.writerow([sw.method, sw.penalty, _fmt(p.ewc_lambda), _fmt(p.mean_accuracy),
                            _fmt(p.ci_halfwidth), p.n_runs, p.n_failed])


def write_prune_csv(path, curves):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRUNE_HEADER)
        for c in curves:
            for f, m, h in c.points:
                w.writerow([c.criterion, _fmt(f), _fmt(m), _fmt(h), len(c.accuracies)])


def write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
