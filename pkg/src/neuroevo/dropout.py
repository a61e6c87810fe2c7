"""Gradient-descent baseline: SGD with dropout and Monte-Carlo dropout uncertainty."""

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ._random import derive_seed
from .ensemble import DEFAULT_THRESHOLD, build_report
from .nn import (
    DUAL,
    NORMAL,
    TUMOR,
    BatchForward,
    _branch_forward,
    backward,
    dropout_forward,
    dropout_mask,
    dropout_seed,
    init_weights,
    unflatten,
)

__all__ = [
    "SgdConfig",
    "McEnsembleConfig",
    "SgdResult",
    "dropout_forward",
    "sgd_train",
    "mc_predict",
    "mc_report",
    "write_sgd_curve_csv",
]

log = logging.getLogger(__name__)


@dataclass
class SgdConfig:
    learning_rate: float = 0.001
    epochs: int = 5000
    dropout_rate: float = 0.5
    seed: int = 0
    stop_at_full_accuracy: bool = False

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class McEnsembleConfig:
    n_passes: int = 500

    def __post_init__(self):
        if self.n_passes < 1:
            raise ValueError("n_passes must be >= 1")


@dataclass
class SgdResult:
    weights: np.ndarray
    curve: list = field(default_factory=list)

    @property
    def final_accuracy(self):
        return self.curve[-1]["train_accuracy"] if self.curve else None


def sgd_train(config, spec, train, w0=None, progress=None):
    """Plain SGD, batch size 1, samples visited in dataset order every epoch.

    Each sample update draws a fresh dropout mask keyed by (seed, epoch, index).
    Accuracy in the curve is measured with dropout off after the epoch.
    """
    samples = list(train)
    if not samples:
        raise ValueError("training set is empty")
    if spec.dropout_rate != config.dropout_rate:
        raise ValueError(f"spec dropout {spec.dropout_rate} differs from config dropout {config.dropout_rate}")
    w = init_weights(spec, derive_seed(config.seed, "init")) if w0 is None else np.array(w0, dtype=np.float32)
    labels = np.array([s.label for s in samples], dtype=np.int8)
    batch = BatchForward.from_samples(spec, samples)
    lr = np.float32(config.learning_rate)
    result = SgdResult(weights=w)
    for epoch in range(config.epochs):
        losses = []
        for k, s in enumerate(samples):
            mask_seed = derive_seed(config.seed, "sgd", epoch, k) if spec.dropout_rate > 0 else None
            loss, grad = backward(spec, w, s, s.label, rng_seed=mask_seed)
            if not math.isfinite(loss):
                raise FloatingPointError(f"epoch {epoch}, sample {s.id}: loss is not finite")
            losses.append(loss)
            w = w - lr * grad
        if not np.all(np.isfinite(w)):
            raise FloatingPointError(f"epoch {epoch}: weights diverged")
        acc = float((batch.predict(w) == labels).mean())
        row = {"epoch": epoch, "mean_loss": float(np.mean(losses)), "train_accuracy": acc}
        result.curve.append(row)
        if progress is not None:
            progress(row)
        if config.stop_at_full_accuracy and acc == 1.0:
            log.info("epoch %d: 100%% training accuracy", epoch)
            break
    result.weights = w
    return result


def write_sgd_curve_csv(curve, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("epoch", "mean_loss", "train_accuracy"))
        for row in curve:
            writer.writerow((row["epoch"], repr(row["mean_loss"]), repr(row["train_accuracy"])))


def pass_seed(seed, k):
    return derive_seed(seed, "mc", k)


def mc_tumor_fractions(weights, spec, samples, config, seed):
    """Tumor vote fraction per sample over ``config.n_passes`` dropout-active passes.

    Pass k uses exactly the masks of ``forward(..., STOCHASTIC, pass_seed(seed, k))``;
    the convolutional features are computed once per sample since dropout only
    acts after the first fully connected layer.
    """
    if spec.dropout_rate <= 0:
        raise ValueError("MC dropout needs a spec with dropout_rate > 0")
    params = unflatten(spec, weights)
    n = config.n_passes
    seeds = [pass_seed(seed, k) for k in range(n)]
    masks = [np.stack([dropout_mask((spec.branch_width,), spec.dropout_rate, dropout_seed(s, b)) for s in seeds])
             for b in range(spec.n_branches)]
    wh, bh = (np.asarray(a, dtype=np.float64) for a in params["head"])
    wo, bo = (np.asarray(a, dtype=np.float64) for a in params["out"])
    out = []
    for sample in samples:
        images = (sample.left, sample.right) if spec.architecture == DUAL else (sample.left,)
        feats = [_branch_forward(params, img, None)[0] for img in images]
        h_in = np.concatenate([f[None, :] * m for f, m in zip(feats, masks)], axis=1)
        h = np.maximum(h_in @ wh.T + bh, 0.0)
        logits = h @ wo.T + bo
        votes = logits[:, TUMOR] > logits[:, NORMAL]
        out.append(votes.sum() / n)
    return np.array(out, dtype=np.float64)


def mc_predict(weights, spec, sample, config, seed):
    """(tumor fraction, normal fraction) from MC-dropout votes on one sample."""
    t = float(mc_tumor_fractions(weights, spec, [sample], config, seed)[0])
    return t, 1.0 - t


def mc_report(weights, spec, test_set, config, seed, threshold=DEFAULT_THRESHOLD):
    samples = list(test_set)
    if not samples:
        raise ValueError("test set is empty")
    return build_report(samples, mc_tumor_fractions(weights, spec, samples, config, seed), threshold)
