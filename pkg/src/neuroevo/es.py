"""Antithetic evolution strategies with rank-shaped utilities.

One generation perturbs the reference weights along ``p`` Gaussian
directions in both signs, scores all ``2p`` models, turns their training
rewards into rank utilities and steps along the antithetic-difference
gradient estimate.
"""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from ._random import derive_seed, philox
from .ensemble import EnsembleMember
from .nn import BatchForward, init_weights

log = logging.getLogger(__name__)

CURVE_FIELDS = ("generation", "train_best", "train_mean", "val_best", "val_mean")


@dataclass
class EsConfig:
    alpha: float = 0.12
    mu: float = 0.05
    population_pairs: int = 40
    n_epochs: int = 100_000
    r_max: int | None = None  # None: |D_T|
    seed: int = 0
    n_conv: int | None = 500  # early stop after this many generations at r_max; None disables
    threads: int = 1

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.population_pairs < 1:
            raise ValueError("population_pairs must be >= 1")
        if self.n_epochs < 0:
            raise ValueError("n_epochs must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class NoiseKey:
    seed: int
    generation: int
    member_index: int


@dataclass
class PopulationEval:
    """Rewards and utilities of one generation; arrays are (p, 2), column 0 is +eps."""

    generation: int
    train_rewards: np.ndarray
    val_rewards: np.ndarray
    utilities: np.ndarray

    def curve_row(self):
        tr, vr = self.train_rewards, self.val_rewards
        return {
            "generation": self.generation,
            "train_best": int(tr.max()),
            "train_mean": float(tr.mean()),
            "val_best": int(vr.max()) if vr.size else 0,
            "val_mean": float(vr.mean()) if vr.size else 0.0,
        }


def sample_epsilon(key, dim):
    """Standard-normal float32 direction addressed by ``key``."""
    if key.generation >= 1 << 32 or key.member_index >= 1 << 32:
        raise ValueError("generation and member_index must fit in 32 bits")
    rng = philox(key.seed, (key.generation << 32) | key.member_index)
    return rng.standard_normal(dim, dtype=np.float32)


def perturb_pair(w, eps, mu):
    w = np.asarray(w, dtype=np.float32)
    eps = np.asarray(eps, dtype=np.float32)
    if w.shape != eps.shape:
        raise ValueError(f"weight/noise length mismatch: {w.shape} vs {eps.shape}")
    step = np.float32(mu) * eps
    return w + step, w - step


def fitness(spec, w, dataset):
    """True positives plus true negatives of the argmax predictions."""
    samples = list(dataset)
    if not samples:
        raise ValueError("fitness needs a non-empty dataset")
    pred = BatchForward.from_samples(spec, samples).predict(w)
    labels = np.array([s.label for s in samples], dtype=np.int8)
    return int((pred == labels).sum())


def rank_normalize(raw_rewards):
    """Log-rank utilities of ``2p`` rewards listed as (member 0 +, member 0 -, member 1 +, ...).

    The best reward gets rank 0. Ties keep list order, so the stable sort
    realises the (member_index, + before -) tie rule. Utilities sum to 2.
    """
    r = np.asarray(raw_rewards, dtype=np.float64).ravel()
    n = r.size
    if n < 2 or n % 2:
        raise ValueError("rank_normalize needs an even number (>= 2) of rewards")
    p = n // 2
    order = np.argsort(-r, kind="stable")
    ranks = np.empty(n, dtype=np.int64)
    ranks[order] = np.arange(n)
    terms = np.maximum(0.0, math.log2(p + 1) - np.log2(ranks + 1.0))
    total = terms.sum()
    shaped = terms / total if total > 0 else np.full(n, 1.0 / n)
    return shaped + 1.0 / (2 * p)


def es_gradient(utilities, eps, mu):
    """(1/p) sum_i (u_i+ - u_i-) / (2 mu) * eps_i, accumulated in float64 in member order."""
    u = np.asarray(utilities, dtype=np.float64).reshape(-1, 2)
    p = u.shape[0]
    coef = (u[:, 0] - u[:, 1]) / (2.0 * mu)
    g = np.zeros(np.shape(eps[0]), dtype=np.float64)
    for i in range(p):
        g += coef[i] * np.asarray(eps[i], dtype=np.float64)
    return g / p


class NetworkProblem:
    """Fitness of CNN weights on a training and a validation set."""

    def __init__(self, spec, train, val):
        train, val = list(train), list(val)
        if not train or not val:
            raise ValueError("training and validation sets must be non-empty")
        overlap = {s.id for s in train} & {s.id for s in val}
        if overlap:
            raise ValueError(f"training and validation sets overlap: {sorted(overlap)[:5]}")
        self.spec = spec
        self.dim = spec.param_count
        self.n_train = len(train)
        self._batch = BatchForward.from_samples(spec, train + val)
        self._labels = np.array([s.label for s in train + val], dtype=np.int8)

    @property
    def r_max(self):
        return self.n_train

    def initial_weights(self, seed):
        return init_weights(self.spec, seed)

    def evaluate(self, w):
        hit = self._batch.predict(w) == self._labels
        return int(hit[: self.n_train].sum()), int(hit[self.n_train:].sum())


def es_step(w, config, problem, generation, noise_seed, sink=None, executor=None):
    """One generation. Returns the next reference weights and the generation's evaluations."""
    p = config.population_pairs
    w = np.asarray(w, dtype=np.float32)
    eps = [sample_epsilon(NoiseKey(noise_seed, generation, i), w.size) for i in range(p)]
    models = []
    for e in eps:
        models.extend(perturb_pair(w, e, config.mu))
    if executor is None:
        scores = [problem.evaluate(m) for m in models]
    else:
        scores = list(executor.map(problem.evaluate, models))
    scores = np.array(scores, dtype=np.int64).reshape(p, 2, 2)
    train_r, val_r = scores[..., 0], scores[..., 1]

    if sink is not None:
        for j, model in enumerate(models):
            i, s = divmod(j, 2)
            sink.offer(EnsembleMember(model, generation, int(train_r[i, s]), int(val_r[i, s])))

    utilities = rank_normalize(train_r.ravel()).reshape(p, 2)
    g = es_gradient(utilities, eps, config.mu)
    w_next = (w.astype(np.float64) + config.alpha * g).astype(np.float32)
    return w_next, PopulationEval(generation, train_r, val_r, utilities)


@dataclass
class TrainResult:
    weights: np.ndarray
    ensemble: object
    curve: list = field(default_factory=list)
    converged: bool = False
    first_converged: int | None = None

    @property
    def generations(self):
        return len(self.curve)


def train_es(config, problem, sink=None, w0=None, progress=None):
    """Run generations until ``n_epochs`` or ``n_conv`` consecutive generations at r_max.

    A generation counts as converged when its best training reward equals r_max.
    ``sink`` receives every evaluated model and keeps the ones worth saving.
    ``progress(row, sink, w)`` is called after each generation with the updated weights.
    """
    r_max = problem.r_max if config.r_max is None else config.r_max
    if r_max != problem.r_max:
        raise ValueError(f"r_max={r_max} must equal the training-set size {problem.r_max}")
    if sink is not None and getattr(sink, "r_max", r_max) != r_max:
        raise ValueError("ensemble sink was built for a different r_max")
    w = problem.initial_weights(derive_seed(config.seed, "init")) if w0 is None else np.asarray(w0, np.float32)
    noise_seed = derive_seed(config.seed, "noise")
    result = TrainResult(weights=w, ensemble=sink)
    streak = 0
    executor = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        for t in range(config.n_epochs):
            w, ev = es_step(w, config, problem, t, noise_seed, sink=sink, executor=executor)
            row = ev.curve_row()
            result.curve.append(row)
            if row["train_best"] == r_max:
                streak += 1
                if result.first_converged is None:
                    result.first_converged = t
                    log.info("generation %d: first model at r_max=%d", t, r_max)
            else:
                streak = 0
            if progress is not None:
                progress(row, sink, w)
            if config.n_conv and streak >= config.n_conv:
                log.info("generation %d: %d generations at r_max, stopping", t, streak)
                break
    finally:
        if executor is not None:
            executor.shutdown()
    result.weights = w
    result.converged = result.first_converged is not None
    return result


def format_curve_row(row):
    return [str(row["generation"]), str(row["train_best"]), repr(row["train_mean"]),
            str(row["val_best"]), repr(row["val_mean"])]


def write_curve_csv(curve, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CURVE_FIELDS)
        for row in curve:
            writer.writerow(format_curve_row(row))


def read_curve_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [{k: (float(v) if "." in v or "e" in v else int(v)) for k, v in row.items()} for row in rows]
