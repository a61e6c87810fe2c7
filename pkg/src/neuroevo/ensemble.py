"""Deep-ensemble harvesting, member persistence and entropy-based UQ reports."""

import enum
import json
import math
import os
import struct
from dataclasses import asdict, dataclass

import jsonschema
import numpy as np

from .data import LABEL_NAMES, BadMagicError, FormatError, LengthMismatchError, TruncatedError
from .nn import NORMAL, TUMOR, BatchForward, NetworkSpec, softmax

DNEW_MAGIC = b"DNEW"
_DNEW_HEADER = struct.Struct("<4sIIIIQ")

DEFAULT_THRESHOLD = 0.2


@dataclass(eq=False)
class EnsembleMember:
    weights: np.ndarray
    generation: int
    train_reward: int
    validation_reward: int


def should_save(train_reward, r_max, validation_reward, last_saved_validation_reward=None):
    """Keep models at maximal training reward whose validation reward differs from the last one kept."""
    if train_reward != r_max:
        return False
    return last_saved_validation_reward is None or validation_reward != last_saved_validation_reward


class MemorySink:
    """Ensemble kept in memory. ``keep_last`` retains only the newest members."""

    def __init__(self, r_max, keep_last=None):
        self.r_max = r_max
        self.keep_last = keep_last
        self.members = []
        self.last_validation = None
        self.n_saved = 0

    def offer(self, member):
        if not should_save(member.train_reward, self.r_max, member.validation_reward, self.last_validation):
            return False
        self.members.append(member)
        self.last_validation = member.validation_reward
        self.n_saved += 1
        if self.keep_last is not None and len(self.members) > self.keep_last:
            del self.members[0]
        return True

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)


class DirectorySink:
    """Ensemble written to ``path`` as one DNEW file per member; only metadata stays in memory."""

    def __init__(self, path, spec, r_max, keep_last=None):
        self.path = path
        self.spec = spec
        self.r_max = r_max
        self.keep_last = keep_last
        self.last_validation = None
        self.n_saved = 0
        self._files = []
        os.makedirs(path, exist_ok=True)
        for name in os.listdir(path):
            if name.endswith(".dnew"):
                os.remove(os.path.join(path, name))
        with open(os.path.join(path, "spec.json"), "w") as f:
            json.dump(spec.to_dict(), f, sort_keys=True)

    def offer(self, member):
        if not should_save(member.train_reward, self.r_max, member.validation_reward, self.last_validation):
            return False
        fname = os.path.join(self.path, f"member_{self.n_saved:07d}.dnew")
        write_member(fname, member, self.spec)
        self._files.append(fname)
        self.last_validation = member.validation_reward
        self.n_saved += 1
        if self.keep_last is not None and len(self._files) > self.keep_last:
            os.remove(self._files.pop(0))
        return True

    def __len__(self):
        return len(self._files)

    def __iter__(self):
        for fname in self._files:
            yield read_member(fname, self.spec)


# -- DNEW member files --------------------------------------------------------


def member_to_bytes(member, spec):
    w = np.asarray(member.weights)
    if w.shape != (spec.param_count,):
        raise ValueError(f"member has {w.shape} weights, spec needs {spec.param_count}")
    header = _DNEW_HEADER.pack(DNEW_MAGIC, spec.spec_id, member.generation, member.train_reward,
                               member.validation_reward, w.size)
    return header + w.astype("<f4").tobytes()


def member_from_bytes(buf, spec=None):
    """Parse a DNEW blob; returns ``(member, spec_id)``. With ``spec``, ids and lengths are checked."""
    if len(buf) < 4 or buf[:4] != DNEW_MAGIC:
        raise BadMagicError("bad magic: not a DNEW file")
    if len(buf) < _DNEW_HEADER.size:
        raise TruncatedError("unexpected end of file in header")
    _, spec_id, gen, tr, vr, count = _DNEW_HEADER.unpack_from(buf)
    body = len(buf) - _DNEW_HEADER.size
    if body < 4 * count:
        raise TruncatedError(f"unexpected end of file: {count} parameters declared, {body // 4} present")
    if body > 4 * count:
        raise LengthMismatchError(f"length mismatch: {body - 4 * count} trailing bytes after {count} parameters")
    if spec is not None:
        if spec_id != spec.spec_id:
            raise FormatError(f"spec id {spec_id} does not match expected {spec.spec_id}")
        if count != spec.param_count:
            raise LengthMismatchError(f"length mismatch: {count} parameters, spec needs {spec.param_count}")
    w = np.frombuffer(buf, dtype="<f4", count=count, offset=_DNEW_HEADER.size).astype(np.float32)
    return EnsembleMember(w, gen, tr, vr), spec_id


def write_member(path, member, spec):
    with open(path, "wb") as f:
        f.write(member_to_bytes(member, spec))


def read_member(path, spec=None):
    with open(path, "rb") as f:
        member, _ = member_from_bytes(f.read(), spec)
    return member


def read_member_with_id(path):
    with open(path, "rb") as f:
        return member_from_bytes(f.read())


class MemberDir:
    """Members stored in a directory, read lazily in file-name order.

    The spec comes from ``spec.json`` when not given.
    """

    def __init__(self, path, spec=None):
        if spec is None:
            spec_file = os.path.join(path, "spec.json")
            if not os.path.exists(spec_file):
                raise FileNotFoundError(f"{path}: no spec.json and no spec given")
            with open(spec_file) as f:
                spec = NetworkSpec.from_dict(json.load(f))
        self.path = path
        self.spec = spec
        self.files = sorted(n for n in os.listdir(path) if n.endswith(".dnew"))

    def __len__(self):
        return len(self.files)

    def __iter__(self):
        for name in self.files:
            yield read_member(os.path.join(self.path, name), self.spec)


def load_members(path, spec=None):
    members = MemberDir(path, spec)
    return members.spec, list(members)


# -- prediction distributions -------------------------------------------------


def vote_fractions(members, spec, samples, mode="vote"):
    """Fraction of members voting tumor for each sample.

    ``mode="mean_prob"`` averages tumor probabilities instead of counting votes.
    """
    samples = list(samples)
    batch = BatchForward.from_samples(spec, samples)
    total = np.zeros(len(samples), dtype=np.float64)
    n = 0
    for m in members:
        if mode == "vote":
            total += batch.predict(m.weights)
        elif mode == "mean_prob":
            total += softmax(batch.logits(m.weights).astype(np.float64))[:, TUMOR]
        else:
            raise ValueError(f"unknown mode {mode!r}")
        n += 1
    if n == 0:
        raise ValueError("ensemble is empty")
    return total / n


def ensemble_predict(members, spec, sample, mode="vote"):
    """(tumor fraction, normal fraction) over the ensemble for one sample."""
    t = float(vote_fractions(members, spec, [sample], mode)[0])
    return t, 1.0 - t


def shannon_entropy(dist):
    """Binary Shannon entropy in bits, with 0 log 0 = 0."""
    s = 0.0
    for q in dist:
        if q < 0 or q > 1:
            raise ValueError(f"probability {q} outside [0, 1]")
        if q > 0:
            s -= q * math.log2(q)
    return max(s, 0.0)


class UqClass(str, enum.Enum):
    CORRECT_LOW = "CorrectLowUncertainty"
    HIGH = "HighUncertainty"
    INCORRECT_LOW = "IncorrectLowUncertainty"


UQ_CLASSES = (UqClass.CORRECT_LOW, UqClass.HIGH, UqClass.INCORRECT_LOW)


def uq_class(predicted, true_label, entropy_bits, threshold=DEFAULT_THRESHOLD):
    if entropy_bits < 0:
        raise ValueError("entropy must be non-negative")
    if entropy_bits > threshold:
        return UqClass.HIGH
    return UqClass.CORRECT_LOW if predicted == true_label else UqClass.INCORRECT_LOW


@dataclass
class UqRecord:
    sample_id: str
    true_label: str
    p_tumor: float
    p_normal: float
    entropy_bits: float
    predicted_label: str
    uq_class: str
    vote_tie: bool


@dataclass
class UqSummary:
    """Table-shaped counts: ``counts[label][uq_class]`` and matching percentages."""

    counts: dict
    percentages: dict
    totals: dict

    def to_dict(self):
        return {"counts": self.counts, "percentages": self.percentages, "totals": self.totals}


def build_report(samples, tumor_fractions, threshold=DEFAULT_THRESHOLD):
    """UQ records and summary from per-sample tumor fractions (ensemble or MC dropout)."""
    records = []
    for s, t in zip(samples, tumor_fractions):
        t = float(t)
        n = 1.0 - t
        ent = shannon_entropy((t, n))
        predicted = TUMOR if t > 0.5 else NORMAL
        cls = uq_class(predicted, s.label, ent, threshold)
        records.append(UqRecord(s.id, LABEL_NAMES[s.label], t, n, ent, LABEL_NAMES[predicted],
                                cls.value, t == 0.5))
    return records, summarize(records)


def summarize(records):
    counts = {lab: {c.value: 0 for c in UQ_CLASSES} for lab in ("tumor", "normal")}
    for r in records:
        counts[r.true_label][r.uq_class] += 1
    totals = {lab: sum(counts[lab].values()) for lab in counts}
    percentages = {
        lab: {c: (round(100.0 * k / totals[lab], 1) if totals[lab] else 0.0) for c, k in counts[lab].items()}
        for lab in counts
    }
    return UqSummary(counts, percentages, totals)


def uq_report(members, spec, test_set, threshold=DEFAULT_THRESHOLD, mode="vote"):
    samples = list(test_set)
    if not samples:
        raise ValueError("test set is empty")
    fractions = vote_fractions(members, spec, samples, mode)
    return build_report(samples, fractions, threshold)


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["method", "threshold", "n_models", "records", "summary"],
    "properties": {
        "method": {"enum": ["ensemble", "mc_dropout"]},
        "threshold": {"type": "number", "minimum": 0},
        "n_models": {"type": "integer", "minimum": 1},
        "records": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["sample_id", "true_label", "p_tumor", "p_normal", "entropy_bits",
                             "predicted_label", "uq_class", "vote_tie"],
                "additionalProperties": False,
                "properties": {
                    "sample_id": {"type": "string"},
                    "true_label": {"enum": ["tumor", "normal"]},
                    "p_tumor": {"type": "number", "minimum": 0, "maximum": 1},
                    "p_normal": {"type": "number", "minimum": 0, "maximum": 1},
                    "entropy_bits": {"type": "number", "minimum": 0, "maximum": 1},
                    "predicted_label": {"enum": ["tumor", "normal"]},
                    "uq_class": {"enum": [c.value for c in UQ_CLASSES]},
                    "vote_tie": {"type": "boolean"},
                },
            },
        },
        "summary": {
            "type": "object",
            "required": ["counts", "percentages", "totals"],
            "properties": {
                "counts": {"$ref": "#/$defs/table"},
                "percentages": {"$ref": "#/$defs/table"},
                "totals": {
                    "type": "object",
                    "required": ["tumor", "normal"],
                    "properties": {"tumor": {"type": "integer"}, "normal": {"type": "integer"}},
                },
            },
        },
    },
    "$defs": {
        "column": {
            "type": "object",
            "required": [c.value for c in UQ_CLASSES],
            "additionalProperties": False,
            "properties": {c.value: {"type": "number", "minimum": 0} for c in UQ_CLASSES},
        },
        "table": {
            "type": "object",
            "required": ["tumor", "normal"],
            "additionalProperties": False,
            "properties": {"tumor": {"$ref": "#/$defs/column"}, "normal": {"$ref": "#/$defs/column"}},
        },
    },
}


def report_document(records, summary, method, threshold, n_models):
    return {
        "method": method,
        "threshold": threshold,
        "n_models": n_models,
        "records": [asdict(r) for r in records],
        "summary": summary.to_dict(),
    }


def validate_report(doc):
    jsonschema.validate(doc, REPORT_SCHEMA)


def dump_report(doc, path):
    validate_report(doc)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
