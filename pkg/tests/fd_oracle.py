"""Central finite-difference oracle for the CNN loss, in float64.

The oracle is only meaningful where the loss is smooth across the whole
stencil, so each evaluation also records the network's activation pattern
(ReLU signs and max-pool winners); a stencil that changes the pattern sits
on a kink and is reported as such.
"""

import numpy as np

from neuroevo import nn


def activation_pattern(spec, w, sample, rng_seed=None):
    mode = nn.STOCHASTIC if rng_seed is not None else nn.DETERMINISTIC
    masks = nn._branch_masks(spec, mode, rng_seed)
    _, probs, cache = nn._forward_full(spec, w, sample, masks)
    parts = [cache["zh"] > 0]
    for b in cache["branches"]:
        parts += [b["z1"] > 0, b["i1"], b["z2"] > 0, b["i2"], b["zf"] > 0]
    return np.concatenate([np.ravel(p).astype(np.int64) for p in parts]), probs


def loss_and_pattern(spec, w, sample, label, rng_seed=None):
    pattern, probs = activation_pattern(spec, w, sample, rng_seed)
    return -np.log(probs[label]), pattern


def fd_gradient(spec, w, sample, label, h=1e-3, rng_seed=None):
    """Returns (gradient estimate, smooth) where smooth is False if any stencil crossed a kink."""
    w = np.asarray(w, dtype=np.float64)
    _, base = loss_and_pattern(spec, w, sample, label, rng_seed)
    g = np.zeros_like(w)
    smooth = True
    for i in range(w.size):
        wp, wm = w.copy(), w.copy()
        wp[i] += h
        wm[i] -= h
        lp, pp = loss_and_pattern(spec, wp, sample, label, rng_seed)
        lm, pm = loss_and_pattern(spec, wm, sample, label, rng_seed)
        smooth &= bool(np.array_equal(pp, base) and np.array_equal(pm, base))
        g[i] = (lp - lm) / (2 * h)
    return g, smooth


def rel_error(a, b):
    """Norm-wise relative error of two gradient vectors."""
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))
