"""Small CNN classifiers over flat weight vectors.

Two code paths share one parameter layout:

* a per-sample reference path (``forward``/``backward``) built from the
  layer primitives below, computed in float64;
* ``BatchForward``, a float32 evaluator that scores one weight vector on a
  whole dataset at once. Evolution strategies spend nearly all their time
  here, so it works on a pooling-parity im2col layout instead of calling
  the primitives.

Tensors are channel-first, ``(C, H, W)``. Convolutions are 3x3, stride 1,
valid padding, cross-correlation. Pooling is 2x2/2; a map with an odd side
is cropped by one row/column first (floor mode).
"""

import json
import math
import zlib
from dataclasses import asdict, dataclass
from functools import cached_property

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._random import derive_seed, philox, stream

DUAL = "dual"
SINGLE = "single"

DETERMINISTIC = "deterministic"
STOCHASTIC = "stochastic"

NORMAL = 0
TUMOR = 1


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerShape:
    name: str
    kind: str  # "conv" or "linear"
    weight_shape: tuple
    bias_shape: tuple

    @property
    def fan_in(self):
        return int(np.prod(self.weight_shape[1:]))

    @property
    def size(self):
        return int(np.prod(self.weight_shape)) + int(np.prod(self.bias_shape))


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of a dual-branch (shared weights) or single-branch CNN."""

    architecture: str = DUAL
    image_size: int = 40
    conv_channels: tuple = (8, 16)
    branch_width: int = 32
    head_width: int = 16
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.architecture not in (DUAL, SINGLE):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if len(self.conv_channels) != 2 or min(self.conv_channels) < 1:
            raise ValueError("conv_channels must be two positive channel counts")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.pooled_sizes[1] < 1:
            raise ShapeError(f"image_size {self.image_size} too small for two conv/pool stages")

    @property
    def pooled_sizes(self):
        """Spatial side after the first and second pooling stages."""
        p1 = (self.image_size - 2) // 2
        return p1, (p1 - 2) // 2

    @property
    def flat_size(self):
        return self.conv_channels[1] * self.pooled_sizes[1] ** 2

    @property
    def n_branches(self):
        return 2 if self.architecture == DUAL else 1

    def layers(self):
        c1, c2 = self.conv_channels
        head_in = self.n_branches * self.branch_width
        return [
            LayerShape("conv1", "conv", (c1, 1, 3, 3), (c1,)),
            LayerShape("conv2", "conv", (c2, c1, 3, 3), (c2,)),
            LayerShape("fc", "linear", (self.branch_width, self.flat_size), (self.branch_width,)),
            LayerShape("head", "linear", (self.head_width, head_in), (self.head_width,)),
            LayerShape("out", "linear", (2, self.head_width), (2,)),
        ]

    @cached_property
    def param_count(self):
        return sum(layer.size for layer in self.layers())

    def to_dict(self):
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @property
    def spec_id(self):
        """32-bit identifier of the architecture (CRC-32 of its canonical JSON)."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return zlib.crc32(text.encode())


@dataclass(frozen=True)
class ClassDistribution:
    p_tumor: float
    p_normal: float

    @property
    def predicted(self):
        # exact ties go to normal
        return TUMOR if self.p_tumor > self.p_normal else NORMAL


# -- parameter layout -------------------------------------------------------


def unflatten(spec, w):
    """Map layer name -> (weight, bias) views into ``w``."""
    w = np.asarray(w)
    if w.ndim != 1 or w.shape[0] != spec.param_count:
        raise ShapeError(f"weight vector has {w.shape} entries, spec needs ({spec.param_count},)")
    params = {}
    offset = 0
    for layer in spec.layers():
        n_w = int(np.prod(layer.weight_shape))
        n_b = int(np.prod(layer.bias_shape))
        weight = w[offset:offset + n_w].reshape(layer.weight_shape)
        offset += n_w
        bias = w[offset:offset + n_b]
        offset += n_b
        params[layer.name] = (weight, bias)
    return params


def flatten(spec, params, dtype=np.float32):
    parts = []
    for layer in spec.layers():
        weight, bias = params[layer.name]
        if np.shape(weight) != layer.weight_shape or np.shape(bias) != layer.bias_shape:
            raise ShapeError(f"layer {layer.name}: got {np.shape(weight)}/{np.shape(bias)}")
        parts.append(np.ravel(weight))
        parts.append(np.ravel(bias))
    return np.concatenate(parts).astype(dtype)


def init_weights(spec, seed):
    """He-normal weights (std sqrt(2/fan_in)), zero biases; a pure function of (spec, seed)."""
    rng = stream(seed, "init", spec.spec_id)
    params = {}
    for layer in spec.layers():
        scale = math.sqrt(2.0 / layer.fan_in)
        weight = rng.standard_normal(layer.weight_shape) * scale
        params[layer.name] = (weight, np.zeros(layer.bias_shape))
    return flatten(spec, params)


# -- layer primitives -------------------------------------------------------


def conv2d_forward(x, kernels, bias):
    """Valid 3x3 cross-correlation. x: (C, H, W), kernels: (O, C, 3, 3)."""
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if x.ndim != 3 or kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d expects (C,H,W) input and (O,C,3,3) kernels, got {x.shape} and {kernels.shape}")
    if kernels.shape[1] != x.shape[0]:
        raise ShapeError(f"conv2d: input has {x.shape[0]} channels, kernels expect {kernels.shape[1]}")
    if bias.shape != (kernels.shape[0],):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {kernels.shape[0]} output channels")
    if x.shape[1] < 3 or x.shape[2] < 3:
        raise ShapeError(f"conv2d: input {x.shape} smaller than the 3x3 kernel")
    windows = sliding_window_view(x, (3, 3), axis=(1, 2))
    return np.einsum("chwij,ocij->ohw", windows, kernels) + bias[:, None, None]


def conv2d_backward(x, kernels, dout):
    """Gradients of ``conv2d_forward`` wrt input, kernels and bias."""
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    windows = sliding_window_view(x, (3, 3), axis=(1, 2))
    dk = np.einsum("ohw,chwij->ocij", dout, windows)
    db = dout.sum(axis=(1, 2))
    dx = np.zeros_like(x)
    ho, wo = dout.shape[1:]
    for i in range(3):
        for j in range(3):
            dx[:, i:i + ho, j:j + wo] += np.einsum("ohw,oc->chw", dout, kernels[:, :, i, j])
    return dx, dk, db


def maxpool2_forward(x, return_indices=False):
    """2x2 max pooling, stride 2. Indices are window offsets 0..3 (row-major)."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"maxpool expects (C,H,W), got {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    if return_indices:
        return out, idx
    return out


def maxpool2_backward(dout, idx):
    c, h2, w2 = dout.shape
    blocks = np.zeros((c, h2, w2, 4), dtype=dout.dtype)
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    return blocks.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * h2, 2 * w2)


def crop_even(x):
    h, w = x.shape[-2:]
    return x[..., : h - h % 2, : w - w % 2]


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dropout_mask(shape, rate, mask_seed):
    """Inverted-dropout multiplier: 0 for dropped units, 1/(1-rate) for survivors."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if rate == 0.0:
        return np.ones(shape)
    keep = philox(mask_seed).random(shape) >= rate
    return keep / (1.0 - rate)


def dropout_forward(activations, rate, mask_seed, training):
    if not training or rate == 0.0:
        return np.asarray(activations)
    a = np.asarray(activations)
    return a * dropout_mask(a.shape, rate, mask_seed).astype(a.dtype, copy=False)


def dropout_seed(rng_seed, branch):
    return derive_seed(rng_seed, "dropout", branch)


# -- reference forward / backward ------------------------------------------


def _finite(name, a):
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite values after layer {name}")
    return a


def _branch_forward(params, image, mask):
    cache = {}
    x = np.asarray(image, dtype=np.float64)[None]
    w1, b1 = params["conv1"]
    z1 = _finite("conv1", conv2d_forward(x, w1, b1))
    a1 = crop_even(np.maximum(z1, 0.0))
    p1, i1 = maxpool2_forward(a1, return_indices=True)
    w2, b2 = params["conv2"]
    z2 = _finite("conv2", conv2d_forward(p1, w2, b2))
    a2 = crop_even(np.maximum(z2, 0.0))
    p2, i2 = maxpool2_forward(a2, return_indices=True)
    flat = p2.ravel()
    wf, bf = params["fc"]
    zf = _finite("fc", np.asarray(wf, dtype=np.float64) @ flat + bf)
    feat = np.maximum(zf, 0.0)
    if mask is not None:
        feat = feat * mask
    cache.update(x=x, z1=z1, p1=p1, i1=i1, z2=z2, p2=p2, i2=i2, flat=flat, zf=zf, mask=mask)
    return feat, cache


def _branch_backward(params, cache, dfeat, grads):
    if cache["mask"] is not None:
        dfeat = dfeat * cache["mask"]
    dzf = dfeat * (cache["zf"] > 0)
    wf, _ = params["fc"]
    grads["fc"][0] += np.outer(dzf, cache["flat"])
    grads["fc"][1] += dzf
    dp2 = (np.asarray(wf, dtype=np.float64).T @ dzf).reshape(cache["p2"].shape)
    da2 = maxpool2_backward(dp2, cache["i2"])
    dz2 = np.zeros_like(cache["z2"])
    dz2[:, : da2.shape[1], : da2.shape[2]] = da2
    dz2 *= cache["z2"] > 0
    w2, _ = params["conv2"]
    dp1, dk2, db2 = conv2d_backward(cache["p1"], w2, dz2)
    grads["conv2"][0] += dk2
    grads["conv2"][1] += db2
    da1 = maxpool2_backward(dp1, cache["i1"])
    dz1 = np.zeros_like(cache["z1"])
    dz1[:, : da1.shape[1], : da1.shape[2]] = da1
    dz1 *= cache["z1"] > 0
    w1, _ = params["conv1"]
    _, dk1, db1 = conv2d_backward(cache["x"], w1, dz1)
    grads["conv1"][0] += dk1
    grads["conv1"][1] += db1


def _branch_masks(spec, mode, rng_seed):
    if mode == DETERMINISTIC:
        return [None] * spec.n_branches
    if mode != STOCHASTIC:
        raise ValueError(f"unknown mode {mode!r}")
    if spec.dropout_rate <= 0.0:
        raise ValueError("stochastic dropout requested on a spec without dropout")
    if rng_seed is None:
        raise ValueError("stochastic dropout needs an rng_seed")
    return [dropout_mask((spec.branch_width,), spec.dropout_rate, dropout_seed(rng_seed, b))
            for b in range(spec.n_branches)]


def _forward_full(spec, w, sample, masks):
    params = unflatten(spec, w)
    images = (sample.left, sample.right) if spec.architecture == DUAL else (sample.left,)
    feats, caches = [], []
    for image, mask in zip(images, masks):
        if np.shape(image) != (spec.image_size, spec.image_size):
            raise ShapeError(f"image shape {np.shape(image)} != ({spec.image_size}, {spec.image_size})")
        f, c = _branch_forward(params, image, mask)
        feats.append(f)
        caches.append(c)
    h_in = np.concatenate(feats)
    wh, bh = params["head"]
    zh = _finite("head", np.asarray(wh, dtype=np.float64) @ h_in + bh)
    h = np.maximum(zh, 0.0)
    wo, bo = params["out"]
    logits = _finite("out", np.asarray(wo, dtype=np.float64) @ h + bo)
    probs = _finite("softmax", softmax(logits))
    return params, probs, dict(branches=caches, h_in=h_in, zh=zh, h=h, logits=logits)


def forward(spec, w, sample, mode=DETERMINISTIC, rng_seed=None):
    """Class distribution for one sample. Class index 0 is normal, 1 is tumor."""
    masks = _branch_masks(spec, mode, rng_seed)
    _, probs, _ = _forward_full(spec, w, sample, masks)
    return ClassDistribution(p_tumor=float(probs[TUMOR]), p_normal=float(probs[NORMAL]))


def backward(spec, w, sample, label, rng_seed=None):
    """Cross-entropy loss and its gradient wrt ``w``.

    With ``rng_seed`` set on a dropout spec, the dropout masks are the ones
    ``forward(..., STOCHASTIC, rng_seed)`` draws.
    """
    if label not in (NORMAL, TUMOR):
        raise ValueError(f"label must be 0 (normal) or 1 (tumor), got {label!r}")
    mode = STOCHASTIC if (rng_seed is not None and spec.dropout_rate > 0) else DETERMINISTIC
    masks = _branch_masks(spec, mode, rng_seed)
    params, probs, cache = _forward_full(spec, w, sample, masks)
    logits = cache["logits"]
    m = logits.max()
    loss = float(m + math.log(np.exp(logits - m).sum()) - logits[label])

    grads = {name: [np.zeros(np.shape(wt)), np.zeros(np.shape(bs))] for name, (wt, bs) in params.items()}
    dlogits = probs.copy()
    dlogits[label] -= 1.0
    wo, _ = params["out"]
    grads["out"][0] += np.outer(dlogits, cache["h"])
    grads["out"][1] += dlogits
    dzh = (np.asarray(wo, dtype=np.float64).T @ dlogits) * (cache["zh"] > 0)
    wh, _ = params["head"]
    grads["head"][0] += np.outer(dzh, cache["h_in"])
    grads["head"][1] += dzh
    dh_in = np.asarray(wh, dtype=np.float64).T @ dzh
    for b, bcache in enumerate(cache["branches"]):
        dfeat = dh_in[b * spec.branch_width:(b + 1) * spec.branch_width]
        _branch_backward(params, bcache, dfeat, grads)
    grad = flatten(spec, {k: tuple(v) for k, v in grads.items()}, dtype=np.asarray(w).dtype)
    return loss, grad


# -- batched float32 evaluator ----------------------------------------------


class BatchForward:
    """Deterministic float32 forward pass of many samples under one weight vector.

    Construct once per dataset; ``logits(w)`` and ``predict(w)`` are then
    thread-safe and reuse the precomputed first-layer patches.
    """

    _PARITY = ((0, 0), (0, 1), (1, 0), (1, 1))

    def __init__(self, spec, left, right=None):
        self.spec = spec
        left = np.asarray(left, dtype=np.float32)
        if left.ndim != 3 or left.shape[1:] != (spec.image_size, spec.image_size):
            raise ShapeError(f"expected (N, {spec.image_size}, {spec.image_size}) images, got {left.shape}")
        self.n = left.shape[0]
        if spec.architecture == DUAL:
            right = np.asarray(right, dtype=np.float32)
            if right.shape != left.shape:
                raise ShapeError(f"left/right stacks differ: {left.shape} vs {right.shape}")
            images = np.concatenate([left, right])
        else:
            images = left
        self.n_images = images.shape[0]
        h1 = spec.pooled_sizes[0]
        # patches[k, q, n, i, j] = image[n, 2i+py+di, 2j+px+dj], k = 3*di+dj, q = parity (py, px)
        patches = np.empty((9, 4, self.n_images, h1, h1), dtype=np.float32)
        for di in range(3):
            for dj in range(3):
                for q, (py, px) in enumerate(self._PARITY):
                    r0, c0 = py + di, px + dj
                    patches[3 * di + dj, q] = images[:, r0:r0 + 2 * h1:2, c0:c0 + 2 * h1:2]
        self._patches = patches.reshape(9, -1)

    @classmethod
    def from_samples(cls, spec, samples):
        left = np.stack([s.left for s in samples]) if samples else np.zeros((0, spec.image_size, spec.image_size))
        right = np.stack([s.right for s in samples]) if samples else left
        return cls(spec, left, right)

    def features(self, w):
        """Post-ReLU branch features, shape (n_images, branch_width)."""
        spec = self.spec
        params = unflatten(spec, np.asarray(w, dtype=np.float32))
        c1, c2 = spec.conv_channels
        h1, h2 = spec.pooled_sizes
        n = self.n_images

        k1, b1 = params["conv1"]
        z = (k1.reshape(c1, 9) @ self._patches).reshape(c1, 4, n, h1, h1)
        a = z.max(axis=1)
        a += b1[:, None, None, None]
        np.maximum(a, 0.0, out=a)

        cols = np.empty((9, c1, 4, n, h2, h2), dtype=np.float32)
        for di in range(3):
            for dj in range(3):
                for q, (py, px) in enumerate(self._PARITY):
                    r0, c0 = py + di, px + dj
                    cols[3 * di + dj, :, q] = a[:, :, r0:r0 + 2 * h2:2, c0:c0 + 2 * h2:2]
        k2, b2 = params["conv2"]
        k2m = k2.transpose(0, 2, 3, 1).reshape(c2, 9 * c1)
        y = (k2m @ cols.reshape(9 * c1, -1)).reshape(c2, 4, n, h2, h2).max(axis=1)
        y += b2[:, None, None, None]
        np.maximum(y, 0.0, out=y)
        flat = y.transpose(1, 0, 2, 3).reshape(n, spec.flat_size)

        wf, bf = params["fc"]
        feat = flat @ wf.T
        feat += bf
        np.maximum(feat, 0.0, out=feat)
        return feat, params

    def logits(self, w):
        feat, params = self.features(w)
        if self.spec.architecture == DUAL:
            h_in = np.concatenate([feat[: self.n], feat[self.n:]], axis=1)
        else:
            h_in = feat
        wh, bh = params["head"]
        h = np.maximum(h_in @ wh.T + bh, 0.0)
        wo, bo = params["out"]
        return h @ wo.T + bo

    def predict(self, w):
        """Predicted labels (1 = tumor); equal logits resolve to normal."""
        z = self.logits(w)
        return (z[:, TUMOR] > z[:, NORMAL]).astype(np.int8)
