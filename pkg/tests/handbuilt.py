"""Hand-set network weights with known behaviour, shared by several test modules."""

import numpy as np

from neuroevo.nn import NetworkSpec, TUMOR, flatten, unflatten


def zero_params(spec):
    return {k: (np.zeros_like(w, dtype=np.float64), np.zeros_like(b, dtype=np.float64))
            for k, (w, b) in unflatten(spec, np.zeros(spec.param_count, np.float32)).items()}


def constant_weights(spec, label):
    """Every sample gets ``label``: all weights zero except one output bias."""
    params = zero_params(spec)
    params["out"][1][label] = 1.0
    return flatten(spec, params)


def brightness_params(spec):
    """Branch feature 0 = mean of pooled local 3x3 averages (a brightness score per eye)."""
    params = zero_params(spec)
    params["conv1"][0][0, 0] = 1.0 / 9.0
    params["conv2"][0][0, 0, 1, 1] = 1.0
    h2 = spec.pooled_sizes[1]
    params["fc"][0][0, : h2 * h2] = 1.0 / (h2 * h2)
    return params


def asymmetry_weights(spec, tau):
    """Dual-branch detector: tumor iff |brightness(left) - brightness(right)| > tau."""
    params = brightness_params(spec)
    bw = spec.branch_width
    params["head"][0][0, 0], params["head"][0][0, bw] = 1.0, -1.0
    params["head"][0][1, 0], params["head"][0][1, bw] = -1.0, 1.0
    params["out"][0][TUMOR, 0] = params["out"][0][TUMOR, 1] = 1.0
    params["out"][1][TUMOR] = -tau
    return flatten(spec, params)


def brightness_gap(spec, dataset):
    """|brightness(left) - brightness(right)| per sample, as the hand-built net sees it."""
    from neuroevo.nn import BatchForward

    batch = BatchForward.from_samples(spec, list(dataset))
    feat, _ = batch.features(flatten(spec, brightness_params(spec)))
    return np.abs(feat[: batch.n, 0] - feat[batch.n:, 0]).astype(np.float64)


def separating_tau(spec, dataset):
    gap = brightness_gap(spec, dataset)
    labels = np.array([s.label for s in dataset])
    lo, hi = gap[labels != TUMOR].max(), gap[labels == TUMOR].min()
    return lo, hi
