"""Orbit-pair datasets: synthetic phantoms, cross-validation folds and the OPR1 file format."""

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from ._random import stream
from .nn import NORMAL, TUMOR

IMAGE_SIZE = 40
LABEL_NAMES = {NORMAL: "normal", TUMOR: "tumor"}

OPR1_MAGIC = b"OPR1"
PROV_MAGIC = b"PROV"


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class LengthMismatchError(FormatError):
    pass


@dataclass(eq=False)
class OrbitSample:
    id: str
    left: np.ndarray
    right: np.ndarray
    label: int

    def __post_init__(self):
        self.left = np.asarray(self.left, dtype=np.float32)
        self.right = np.asarray(self.right, dtype=np.float32)
        if self.label not in (NORMAL, TUMOR):
            raise ValueError(f"sample {self.id}: label must be 0 or 1, got {self.label!r}")
        for side, img in (("left", self.left), ("right", self.right)):
            if img.ndim != 2:
                raise ValueError(f"sample {self.id}: {side} image must be 2-D, got {img.shape}")
            if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
                raise ValueError(f"sample {self.id}: {side} image values must be finite and in [0, 1]")

    def __eq__(self, other):
        if not isinstance(other, OrbitSample):
            return NotImplemented
        return (self.id == other.id and self.label == other.label
                and np.array_equal(self.left, other.left) and np.array_equal(self.right, other.right))


@dataclass(eq=False)
class Dataset:
    samples: list
    provenance: dict = field(default_factory=lambda: {"source": "ingested"})

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("dataset sample ids must be unique")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.provenance == other.provenance and self.samples == other.samples

    @property
    def ids(self):
        return [s.id for s in self.samples]

    @property
    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int8)

    def class_counts(self):
        labels = self.labels
        return {"tumor": int((labels == TUMOR).sum()), "normal": int((labels == NORMAL).sum())}


@dataclass
class PhantomParams:
    """Knobs of the synthetic T2-like orbit phantom.

    Intensities are fractions of full scale. ``lesion_contrast`` scales the
    humor-to-lesion intensity gap (1 = nominal, 0.5 = half as visible).
    """

    globe_radius_mean: float = 12.0
    globe_radius_jitter: float = 0.5
    center_jitter: float = 1.0
    background: float = 0.08
    humor_low: float = 0.75
    humor_high: float = 0.95
    humor_eye_jitter: float = 0.02
    lesion_width_deg_low: float = 90.0
    lesion_width_deg_high: float = 140.0
    lesion_thickness_low: float = 4.0
    lesion_thickness_high: float = 6.0
    lesion_low: float = 0.15
    lesion_high: float = 0.4
    lesion_contrast: float = 1.0
    noise_sigma: float = 0.02
    artifact_probability: float = 0.05
    artifact_strength: float = 0.4
    artifact_width: float = 2.5
    seed: int = 0

    def __post_init__(self):
        for name in ("background", "humor_low", "humor_high", "lesion_low", "lesion_high"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.humor_low > self.humor_high or self.lesion_low > self.lesion_high:
            raise ValueError("intensity bands must be ordered low <= high")
        if not 0.0 <= self.artifact_probability <= 1.0:
            raise ValueError("artifact_probability must lie in [0, 1]")
        if not 0.0 <= self.lesion_contrast <= 1.0 or not 0.0 <= self.artifact_strength <= 1.0:
            raise ValueError("lesion_contrast and artifact_strength must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _globe(rng, params, radius, humor, size):
    c = (size - 1) / 2.0
    cy = c + rng.uniform(-params.center_jitter, params.center_jitter)
    cx = c + rng.uniform(-params.center_jitter, params.center_jitter)
    if cy - radius < 0 or cx - radius < 0 or cy + radius > size - 1 or cx + radius > size - 1:
        raise ValueError(f"globe of radius {radius:.2f} at ({cy:.2f}, {cx:.2f}) exceeds the {size}x{size} frame")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dist = np.hypot(yy - cy, xx - cx)
    theta = np.arctan2(yy - cy, xx - cx)
    img = np.full((size, size), params.background)
    inside = dist <= radius
    eye_humor = np.clip(humor + rng.uniform(-params.humor_eye_jitter, params.humor_eye_jitter), 0.0, 1.0)
    img[inside] = eye_humor
    return img, inside, dist, theta, eye_humor


def _add_lesion(rng, params, img, inside, dist, theta, radius, humor):
    center = rng.uniform(-math.pi, math.pi)
    half_width = math.radians(rng.uniform(params.lesion_width_deg_low, params.lesion_width_deg_high)) / 2
    thickness = rng.uniform(params.lesion_thickness_low, params.lesion_thickness_high)
    nominal = rng.uniform(params.lesion_low, params.lesion_high)
    intensity = humor - params.lesion_contrast * (humor - nominal)
    dtheta = np.abs(np.angle(np.exp(1j * (theta - center))))
    crescent = inside & (dist >= radius - thickness) & (dtheta <= half_width)
    img[crescent] = intensity
    return crescent


def _add_streak(rng, params, img, size):
    angle = rng.uniform(0, math.pi)
    c = (size - 1) / 2.0
    offset = rng.uniform(-size / 6, size / 6)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    d = (xx - c) * math.sin(angle) - (yy - c) * math.cos(angle) - offset
    band = np.abs(d) <= params.artifact_width / 2
    img[band] *= 1.0 - params.artifact_strength


def gen_phantom(params, sample_index, label, size=IMAGE_SIZE):
    """One orbit pair, fully determined by ``(params.seed, sample_index, label)``.

    Tumor pairs carry a dark crescent on the inner rim of exactly one globe.
    Normal pairs may carry a faint motion streak in one image instead.
    """
    if label not in (NORMAL, TUMOR):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    rng = stream(params.seed, "phantom", label, sample_index)
    radius = params.globe_radius_mean + rng.uniform(-params.globe_radius_jitter, params.globe_radius_jitter)
    humor = rng.uniform(params.humor_low, params.humor_high)
    eyes = [_globe(rng, params, radius, humor, size) for _ in range(2)]
    if label == TUMOR:
        side = int(rng.integers(2))
        img, inside, dist, theta, eye_humor = eyes[side]
        _add_lesion(rng, params, img, inside, dist, theta, radius, eye_humor)
    elif rng.random() < params.artifact_probability:
        side = int(rng.integers(2))
        _add_streak(rng, params, eyes[side][0], size)
    images = []
    for img, *_ in eyes:
        noisy = img + rng.normal(0.0, params.noise_sigma, img.shape) if params.noise_sigma > 0 else img
        images.append(np.clip(noisy, 0.0, 1.0).astype(np.float32))
    name = LABEL_NAMES[label]
    return OrbitSample(id=f"{name}_{sample_index}", left=images[0], right=images[1], label=label)


def gen_dataset(params, n_tumor, n_normal, start_index=0):
    """Tumor and normal phantoms, interleaved, with ids ``tumor_k`` / ``normal_k``.

    ``start_index`` offsets k so that several pools drawn from one seed stay disjoint.
    """
    if n_tumor < 0 or n_normal < 0:
        raise ValueError("sample counts must be non-negative")
    samples = []
    for k in range(max(n_tumor, n_normal)):
        if k < n_tumor:
            samples.append(gen_phantom(params, start_index + k, TUMOR))
        if k < n_normal:
            samples.append(gen_phantom(params, start_index + k, NORMAL))
    provenance = {
        "source": "generated",
        "params": params.to_dict(),
        "n_tumor": n_tumor,
        "n_normal": n_normal,
        "start_index": start_index,
    }
    return Dataset(samples, provenance)


def crossfold(d_a, d_b, fold):
    """Two-fold split: fold 1 trains on ``d_a`` and tests on ``d_b``; fold 2 swaps them."""
    overlap = set(d_a.ids) & set(d_b.ids)
    if overlap:
        raise ValueError(f"pools share sample ids: {sorted(overlap)[:5]}")
    if fold == 1:
        return d_a, d_b
    if fold == 2:
        return d_b, d_a
    raise ValueError(f"fold must be 1 or 2, got {fold!r}")


# -- OPR1 container -----------------------------------------------------------


def to_bytes(dataset):
    out = bytearray(OPR1_MAGIC)
    out += struct.pack("<I", len(dataset))
    for s in dataset:
        if s.left.shape != (IMAGE_SIZE, IMAGE_SIZE) or s.right.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"sample {s.id}: OPR1 stores {IMAGE_SIZE}x{IMAGE_SIZE} images only")
        ident = s.id.encode("utf-8")
        out += struct.pack("<H", len(ident)) + ident
        out += struct.pack("<B", s.label)
        out += s.left.astype("<f4").tobytes()
        out += s.right.astype("<f4").tobytes()
    prov = json.dumps(dataset.provenance, sort_keys=True).encode("utf-8")
    out += PROV_MAGIC + struct.pack("<I", len(prov)) + prov
    return bytes(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, where):
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"unexpected end of file in {where}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    @property
    def remaining(self):
        return len(self.buf) - self.pos


def from_bytes(buf):
    r = _Reader(buf)
    if len(buf) < 4 or r.take(4, "header") != OPR1_MAGIC:
        raise BadMagicError("bad magic: not an OPR1 file")
    (count,) = struct.unpack("<I", r.take(4, "header"))
    n_px = IMAGE_SIZE * IMAGE_SIZE
    samples = []
    for k in range(count):
        where = f"record {k}"
        (id_len,) = struct.unpack("<H", r.take(2, where))
        ident = r.take(id_len, where).decode("utf-8")
        (label,) = struct.unpack("<B", r.take(1, where))
        if label not in (NORMAL, TUMOR):
            raise FormatError(f"record {k}: invalid label byte {label}")
        left = np.frombuffer(r.take(4 * n_px, where), dtype="<f4").reshape(IMAGE_SIZE, IMAGE_SIZE)
        right = np.frombuffer(r.take(4 * n_px, where), dtype="<f4").reshape(IMAGE_SIZE, IMAGE_SIZE)
        try:
            samples.append(OrbitSample(ident, left.astype(np.float32), right.astype(np.float32), label))
        except ValueError as exc:
            raise FormatError(f"record {k}: {exc}") from None
    provenance = {"source": "ingested"}
    if r.remaining:
        extra = r.remaining
        if extra < 8 or r.take(4, "provenance") != PROV_MAGIC:
            raise LengthMismatchError(f"length mismatch: {extra} unexpected bytes after {count} records")
        (n,) = struct.unpack("<I", r.take(4, "provenance"))
        provenance = json.loads(r.take(n, "provenance").decode("utf-8"))
        if r.remaining:
            raise LengthMismatchError(f"length mismatch: {r.remaining} trailing bytes after provenance block")
    try:
        return Dataset(samples, provenance)
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def save_dataset(dataset, path):
    data = to_bytes(dataset)
    with open(path, "wb") as f:
        f.write(data)
    return hashlib.sha256(data).hexdigest()


def load_dataset(path):
    with open(path, "rb") as f:
        return from_bytes(f.read())


def dataset_checksum(dataset):
    return hashlib.sha256(to_bytes(dataset)).hexdigest()
