"""Synthetic stand-ins for keyword spotting and anomaly detection, and their metrics."""

from __future__ import annotations

import csv
import json
import struct
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor

DATASET_MAGIC = b"MNDS"
DATASET_VERSION = 1
EXACT_AUC_LIMIT = 10_000

# The reference keyword-spotting stand-in used by the search acceptance run.
REFERENCE_KWS = dict(num_classes=4, samples_per_class=500, shape=(20, 8), jitter=3, noise=0.9, test_fraction=0.4)


@dataclass
class LabeledDataset:
    features: np.ndarray  # (N, H, W, C)
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    num_classes: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 4:
            raise ValueError(f"features must be (N, H, W, C), got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("label count must equal batch size")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if self.labels.size else 0

    def __len__(self):
        return self.labels.shape[0]

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.features[idx], self.labels[idx]


@dataclass
class AnomalyEvalSet:
    train: LabeledDataset  # labels are machine ids; normal samples only
    test_features: np.ndarray
    test_machine_ids: np.ndarray
    is_anomalous: np.ndarray  # bool
    num_machine_ids: int = 4

    def __post_init__(self):
        self.test_features = np.asarray(self.test_features, dtype=np.float64)
        self.test_machine_ids = np.asarray(self.test_machine_ids, dtype=np.int64)
        self.is_anomalous = np.asarray(self.is_anomalous, dtype=bool)


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def _band_template(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    """A few time-modulated frequency bands on a zero background."""
    t_len, f_len = shape
    tmpl = np.zeros(shape)
    t = np.arange(t_len)[:, None]
    for _ in range(max(2, f_len // 4)):
        f0 = rng.integers(0, f_len)
        width = rng.integers(1, max(2, f_len // 4) + 1)
        period = rng.uniform(4.0, max(5.0, t_len))
        phase = rng.uniform(0, 2 * np.pi)
        band = np.zeros(f_len)
        band[f0:f0 + width] = rng.uniform(0.6, 1.2)
        tmpl += band[None, :] * (0.5 + 0.5 * np.sin(2 * np.pi * t / period + phase))
    return tmpl


def _render(templates, labels, rng, jitter, noise, shape):
    out = np.empty((len(labels),) + shape + (1,))
    shifts = rng.integers(-jitter, jitter + 1, size=len(labels)) if jitter else np.zeros(len(labels), dtype=int)
    eps = rng.standard_normal(out.shape)
    for i, (c, s) in enumerate(zip(labels, shifts)):
        out[i, ..., 0] = np.roll(templates[c], s, axis=0)
    return out + noise * eps


def class_templates(num_classes: int, shape: tuple[int, int], seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0])
    return np.stack([_band_template(rng, shape) for _ in range(num_classes)])


def gen_synthetic_spectrogram_task(
    num_classes: int = 4,
    samples_per_class: int = 100,
    shape: tuple[int, int] = (49, 10),
    seed: int = 0,
    jitter: int = 3,
    noise: float = 0.5,
    test_fraction: float = 0.25,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Band-patterned class templates with time-shift jitter and Gaussian noise.

    Returns disjoint (train, test) splits; the same seed gives identical bytes.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if len(shape) != 2 or min(shape) < 2:
        raise ValueError(f"degenerate shape {shape}")
    if samples_per_class < 2:
        raise ValueError("samples_per_class must be >= 2")
    shape = tuple(int(s) for s in shape)
    templates = class_templates(num_classes, shape, seed)
    rng = np.random.default_rng([seed, 1])
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    feats = _render(templates, labels, rng, jitter, noise, shape)
    n_test = max(1, int(round(samples_per_class * test_fraction)))
    test_mask = np.zeros(len(labels), dtype=bool)
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        test_mask[rng.permutation(idx)[:n_test]] = True
    train = LabeledDataset(feats[~test_mask], labels[~test_mask], "train", num_classes)
    test = LabeledDataset(feats[test_mask], labels[test_mask], "test", num_classes)
    return train, test


def nearest_template_accuracy(dataset: LabeledDataset, templates: np.ndarray, jitter: int) -> float:
    """Oracle classifier: best correlation over every allowed time shift."""
    x = dataset.features[..., 0]
    best = np.full((len(dataset), len(templates)), -np.inf)
    for s in range(-jitter, jitter + 1):
        shifted = np.roll(templates, s, axis=1)
        d = -((x[:, None] - shifted[None]) ** 2).sum(axis=(2, 3))
        best = np.maximum(best, d)
    return float(np.mean(best.argmax(axis=1) == dataset.labels))


def gen_synthetic_ad_task(
    num_machine_ids: int = 4,
    seed: int = 0,
    perturbation: float = 0.3,
    train_per_id: int = 60,
    test_normal_per_id: int = 25,
    test_anomalous_per_id: int = 25,
    shape: tuple[int, int] = (32, 32),
    jitter: int = 2,
    noise: float = 0.4,
) -> AnomalyEvalSet:
    """Per-machine normal templates; anomalies blend a template toward another id's.

    ``perturbation`` is the blend weight, so 0 makes anomalies statistically
    identical to normal samples. Anomalies appear only in the test split.
    """
    if num_machine_ids < 2:
        raise ValueError("num_machine_ids must be >= 2")
    if not 0.0 <= perturbation <= 1.0:
        raise ValueError("perturbation must lie in [0, 1]")
    shape = tuple(int(s) for s in shape)
    templates = class_templates(num_machine_ids, shape, seed + 7919)
    rng = np.random.default_rng([seed, 2])
    train_ids = np.repeat(np.arange(num_machine_ids), train_per_id)
    train = LabeledDataset(_render(templates, train_ids, rng, jitter, noise, shape), train_ids, "train", num_machine_ids)

    normal_ids = np.repeat(np.arange(num_machine_ids), test_normal_per_id)
    normal = _render(templates, normal_ids, rng, jitter, noise, shape)
    anom_ids = np.repeat(np.arange(num_machine_ids), test_anomalous_per_id)
    other = (anom_ids + rng.integers(1, num_machine_ids, size=anom_ids.size)) % num_machine_ids
    blended = (1.0 - perturbation) * templates[anom_ids] + perturbation * templates[other]
    shifts = rng.integers(-jitter, jitter + 1, size=anom_ids.size)
    anom = np.stack([np.roll(b, s, axis=0) for b, s in zip(blended, shifts)])[..., None]
    anom = anom + noise * rng.standard_normal(anom.shape)

    feats = np.concatenate([normal, anom])
    ids = np.concatenate([normal_ids, anom_ids])
    flags = np.concatenate([np.zeros(normal_ids.size, bool), np.ones(anom_ids.size, bool)])
    order = rng.permutation(len(ids))
    return AnomalyEvalSet(train, feats[order], ids[order], flags[order], num_machine_ids)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def predict_logits(network, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Batched logits; models with an ``evaluating`` context run in inference mode."""
    outs = []
    ctx = network.evaluating() if hasattr(network, "evaluating") else nullcontext()
    with ctx:
        for start in range(0, len(features), batch_size):
            y = network(features[start:start + batch_size])
            outs.append(y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64))
    return np.concatenate(outs) if outs else np.zeros((0, 0))


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate_accuracy(network, dataset: LabeledDataset, batch_size: int = 256) -> float:
    return accuracy_from_logits(predict_logits(network, dataset.features, batch_size), dataset.labels)


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def scores_from_logits(logits: np.ndarray, machine_ids: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    machine_ids = np.asarray(machine_ids, dtype=np.int64)
    if logits.shape[0] != machine_ids.shape[0]:
        raise ValueError("one machine id per sample required")
    bad = (machine_ids < 0) | (machine_ids >= logits.shape[1])
    if bad.any():
        raise ValueError(f"unknown machine id {int(machine_ids[bad][0])}")
    return -_softmax(logits)[np.arange(len(machine_ids)), machine_ids]


def anomaly_scores(classifier, eval_set: AnomalyEvalSet, batch_size: int = 256) -> np.ndarray:
    """Negative softmax probability of each sample's own machine id."""
    return scores_from_logits(predict_logits(classifier, eval_set.test_features, batch_size), eval_set.test_machine_ids)


def auc_roc(scores, is_anomalous, method: str = "auto") -> float:
    """P(anomalous score > normal score) + 0.5 P(tie).

    ``method`` is "exact" (all pairs), "rank" (Mann-Whitney from average
    ranks) or "auto", which counts pairs up to ``EXACT_AUC_LIMIT`` samples.
    """
    if method not in ("auto", "exact", "rank"):
        raise ValueError(f"unknown AUC method {method!r}")
    scores = np.asarray(scores, dtype=np.float64).ravel()
    flags = np.asarray(is_anomalous, dtype=bool).ravel()
    if scores.shape != flags.shape:
        raise ValueError("scores and flags differ in length")
    pos, neg = scores[flags], scores[~flags]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs both anomalous and normal samples")
    if method == "exact" or (method == "auto" and scores.size <= EXACT_AUC_LIMIT):
        wins = 0.0
        for start in range(0, pos.size, 512):
            p = pos[start:start + 512, None]
            wins += np.sum(p > neg[None, :]) + 0.5 * np.sum(p == neg[None, :])
        return float(wins / (pos.size * neg.size))
    # average ranks give the half-credit tie convention
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size)
    _, first, counts = np.unique(sorted_scores, return_index=True, return_counts=True)
    avg = first + (counts + 1) / 2.0
    ranks[order] = np.repeat(avg, counts)
    u = ranks[flags].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None):
    """Binary container: magic, version, header length, JSON header, raw little-endian data."""
    entries, blobs = [], []
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
        a = a.astype(dt, copy=False)
        entries.append({"name": name, "dtype": dt.str, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC + struct.pack("<HI", DATASET_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset container")
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    header = json.loads(raw[10:10 + hlen])
    offset = 10 + hlen
    out = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        if offset + n > len(raw):
            raise ValueError(f"{path}: truncated array {e['name']!r}")
        out[e["name"]] = np.frombuffer(raw[offset:offset + n], dtype=dt).reshape(e["shape"]).copy()
        offset += n
    return out, header["meta"]


def save_dataset(path, ds: LabeledDataset):
    save_arrays(path, {"features": ds.features, "labels": ds.labels}, {"split": ds.split, "num_classes": ds.num_classes})


def load_dataset(path) -> LabeledDataset:
    arrays, meta = load_arrays(path)
    return LabeledDataset(arrays["features"], arrays["labels"], meta.get("split", "train"), meta.get("num_classes"))


def save_ad_set(path, es: AnomalyEvalSet):
    save_arrays(
        path,
        {
            "train_features": es.train.features,
            "train_labels": es.train.labels,
            "test_features": es.test_features,
            "test_machine_ids": es.test_machine_ids,
            "is_anomalous": es.is_anomalous.astype(np.uint8),
        },
        {"kind": "anomaly", "num_machine_ids": es.num_machine_ids},
    )


def load_ad_set(path) -> AnomalyEvalSet:
    a, meta = load_arrays(path)
    n = meta.get("num_machine_ids", 4)
    train = LabeledDataset(a["train_features"], a["train_labels"], "train", n)
    return AnomalyEvalSet(train, a["test_features"], a["test_machine_ids"], a["is_anomalous"].astype(bool), n)


def write_scores_csv(path, scores, is_anomalous, sample_ids=None):
    sample_ids = range(len(scores)) if sample_ids is None else sample_ids
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "score", "is_anomalous"])
        for sid, s, f in zip(sample_ids, scores, is_anomalous):
            w.writerow([sid, repr(float(s)), int(bool(f))])


def read_scores_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["sample_id", "score", "is_anomalous"]:
            raise ValueError(f"expected header sample_id,score,is_anomalous, got {reader.fieldnames}")
        scores, flags = [], []
        for i, rec in enumerate(reader, start=1):
            try:
                scores.append(float(rec["score"]))
                flag = rec["is_anomalous"].strip().lower()
                if flag not in ("0", "1", "true", "false"):
                    raise ValueError(f"bad flag {rec['is_anomalous']!r}")
                flags.append(flag in ("1", "true"))
            except (TypeError, ValueError, AttributeError) as exc:
                raise ValueError(f"row {i}: {exc}") from None
    return np.array(scores), np.array(flags, dtype=bool)
