"""Linearly separable 2-D toy task for checking the ES loop end to end."""

import json
import math
import zlib

import numpy as np

from ._random import stream


def make_probe_data(seed, n_per_class=10, margin=0.3):
    """Points on either side of a random line through the origin, at least ``margin`` away."""
    rng = stream(seed, "probe")
    angle = rng.uniform(0, 2 * math.pi)
    normal = np.array([math.cos(angle), math.sin(angle)])
    pos, neg = [], []
    while len(pos) < n_per_class or len(neg) < n_per_class:
        x = rng.standard_normal(2)
        s = float(x @ normal)
        if s > margin and len(pos) < n_per_class:
            pos.append(x)
        elif s < -margin and len(neg) < n_per_class:
            neg.append(x)
    x = np.array(pos + neg, dtype=np.float32)
    y = np.array([1] * n_per_class + [0] * n_per_class, dtype=np.int8)
    return x, y


class LinearProbeProblem:
    """Two weights, no bias: predict class 1 iff ``w . x > 0``."""

    dim = 2

    def __init__(self, train, val):
        self.x_train, self.y_train = train
        self.x_val, self.y_val = val
        if len(self.y_train) == 0 or len(self.y_val) == 0:
            raise ValueError("probe sets must be non-empty")

    @property
    def r_max(self):
        return len(self.y_train)

    init_scale = 0.05

    def initial_weights(self, seed):
        # small start: a unit-scale draw sits where mu-sized probes rarely flip any prediction
        return (self.init_scale * stream(seed, "probe-init").standard_normal(2)).astype(np.float32)

    def evaluate(self, w):
        w = np.asarray(w, dtype=np.float32)
        tr = ((self.x_train @ w > 0).astype(np.int8) == self.y_train).sum()
        va = ((self.x_val @ w > 0).astype(np.int8) == self.y_val).sum()
        return int(tr), int(va)


class ProbeSpec:
    """Just enough of a network spec to store probe weights as DNEW members."""

    param_count = 2

    def to_dict(self):
        return {"architecture": "linear_probe", "param_count": 2}

    @property
    def spec_id(self):
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return zlib.crc32(text.encode("utf-8"))
