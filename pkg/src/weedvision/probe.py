"""Linear probing of frozen transformer features for plant classification."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .dataio import ImageRecord
from .errors import (
    ConfigError,
    DegenerateDataError,
    EmptyInputError,
    ValidationError,
)
from .model.detector import Detector, preprocess
from .numerics import no_grad
from .parallel import ordered_map

log = logging.getLogger(__name__)

GROUP_NAMES = ("crop", "weed")


@dataclass
class ProbeDataset:
    """Frozen embeddings with class labels and a crop/weed grouping."""

    features: np.ndarray
    labels: np.ndarray
    class_names: Tuple[str, ...]
    group_map: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValidationError(f"features must be 2-D, got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValidationError("features contain non-finite values")
        if self.labels.shape != (self.features.shape[0],):
            raise ValidationError(
                f"expected {self.features.shape[0]} labels, got {self.labels.shape}"
            )
        k = len(self.class_names)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= k):
            raise ValidationError(f"labels must lie in [0, {k})")
        for name, group in self.group_map.items():
            if group not in GROUP_NAMES:
                raise ValidationError(f"group for {name!r} must be one of {GROUP_NAMES}")

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])


def _embed_one(model: Detector, record: ImageRecord) -> np.ndarray:
    out = model.vit(preprocess(record, model.cfg))
    return np.asarray(out.class_final.data[0], dtype=np.float32).copy()


def extract_frozen_features(
    model: Detector, records: Sequence[ImageRecord], workers: int = 1
) -> np.ndarray:
    """Pooled class-token embedding per image; never updates the model."""
    if model.vit is None:
        raise ConfigError(
            f"branch_mode {model.cfg.branch_mode!r} has no transformer to probe"
        )
    records = list(records)
    if not records:
        raise EmptyInputError("no images to embed")
    with no_grad():
        rows = ordered_map(lambda r: _embed_one(model, r), records, workers=workers)
    return np.stack(rows)


class VitEmbedder:
    """Curation-compatible embedder backed by a detector's transformer."""

    def __init__(self, model: Detector):
        if model.vit is None:
            raise ConfigError(
                f"branch_mode {model.cfg.branch_mode!r} has no transformer branch"
            )
        self.model = model
        self.dim = model.cfg.vit.embed_dim

    def __call__(self, record: ImageRecord) -> np.ndarray:
        with no_grad():
            return _embed_one(self.model, record)


def param_checksum(module) -> str:
    """Order-stable SHA-256 over all parameter bytes, for frozen contracts."""
    digest = hashlib.sha256()
    for name, p in module.named_parameters():
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(p.data).tobytes())
    return digest.hexdigest()


def probe_split(n: int, split: str = "7:3", seed: int = 0) -> Tuple[List[int], List[int]]:
    """Shuffle indices with the seed, then cut train/test fractions."""
    try:
        parts = [float(p) for p in split.split(":")]
    except ValueError as exc:
        raise ConfigError(f"bad split string {split!r}") from exc
    if len(parts) != 2 or any(p < 0 for p in parts) or sum(parts) <= 0:
        raise ConfigError(f"split must be two non-negative ratios, got {split!r}")
    order = [int(i) for i in np.random.default_rng(seed).permutation(n)]
    n_train = min(int(round(parts[0] / sum(parts) * n)), n)
    train, test = order[:n_train], order[n_train:]
    if not train or not test:
        raise DegenerateDataError(f"split {split!r} leaves an empty side for n={n}")
    return train, test


@dataclass
class ProbeResult:
    """Trained linear classifier plus its held-out evaluation."""

    weight: np.ndarray
    bias: np.ndarray
    train_indices: List[int]
    test_indices: List[int]
    test_accuracy: float
    per_class: Dict[str, float]
    notes: List[str] = field(default_factory=list)

    def predict(self, features: np.ndarray) -> np.ndarray:
        logits = np.asarray(features, dtype=np.float64) @ self.weight.T + self.bias
        return logits.argmax(axis=1)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def train_linear_probe(
    ds: ProbeDataset,
    epochs: int = 30,
    batch: int = 128,
    lr: float = 0.05,
    seed: int = 0,
    split: str = "7:3",
) -> ProbeResult:
    """SGD softmax regression on frozen features; deterministic per seed."""
    if epochs < 0 or batch < 1:
        raise ConfigError(f"bad probe schedule: epochs={epochs} batch={batch}")
    if len(np.unique(ds.labels)) < 2:
        raise DegenerateDataError("probe needs at least two distinct classes")
    train_idx, test_idx = probe_split(ds.n, split, seed)
    y_train = ds.labels[train_idx]
    if len(np.unique(y_train)) < 2:
        raise DegenerateDataError("train split holds a single class")

    k = len(ds.class_names)
    x_train = ds.features[train_idx].astype(np.float64)
    weight = np.zeros((k, ds.dim))
    bias = np.zeros(k)
    onehot = np.eye(k)[y_train]

    for epoch in range(epochs):
        perm = np.random.default_rng([seed, epoch]).permutation(len(train_idx))
        for start in range(0, len(perm), batch):
            rows = perm[start : start + batch]
            x = x_train[rows]
            probs = _softmax(x @ weight.T + bias)
            g = (probs - onehot[rows]) / len(rows)
            weight -= lr * (g.T @ x)
            bias -= lr * g.sum(axis=0)

    result = ProbeResult(
        weight=weight,
        bias=bias,
        train_indices=train_idx,
        test_indices=test_idx,
        test_accuracy=0.0,
        per_class={},
    )
    y_test = ds.labels[test_idx]
    preds = result.predict(ds.features[test_idx])
    result.test_accuracy = top1_accuracy(preds, y_test)
    for cid, name in enumerate(ds.class_names):
        mask = y_test == cid
        if not mask.any():
            result.notes.append(f"class {name!r} absent from test split")
            continue
        result.per_class[name] = top1_accuracy(preds[mask], y_test[mask])
    return result


def top1_accuracy(preds: Sequence[int], labels: Sequence[int]) -> float:
    """Percent exact-match agreement."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValidationError(f"length mismatch: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise EmptyInputError("accuracy undefined for empty inputs")
    return float(100.0 * np.mean(preds == labels))


@dataclass
class GroupAccuracy:
    """Unweighted per-group accuracy means; empty groups report None."""

    crop_avg: Optional[float]
    weed_avg: Optional[float]
    overall_avg: float
    notes: List[str] = field(default_factory=list)


def group_accuracy(
    per_class_acc: Mapping[str, float], group_map: Mapping[str, str]
) -> GroupAccuracy:
    """Average per-class accuracies within crop/weed groups and overall."""
    if not per_class_acc:
        raise EmptyInputError("no per-class accuracies to group")
    buckets: Dict[str, List[float]] = {g: [] for g in GROUP_NAMES}
    for name, acc in per_class_acc.items():
        group = group_map.get(name)
        if group is None:
            raise ValidationError(f"class {name!r} missing from group map")
        if group not in GROUP_NAMES:
            raise ValidationError(f"group for {name!r} must be one of {GROUP_NAMES}")
        buckets[group].append(float(acc))

    notes = []
    means = {}
    for group in GROUP_NAMES:
        if buckets[group]:
            means[group] = float(np.mean(buckets[group]))
        else:
            means[group] = None
            notes.append(f"no {group} classes present")
    overall = float(np.mean([float(a) for a in per_class_acc.values()]))
    return GroupAccuracy(
        crop_avg=means["crop"],
        weed_avg=means["weed"],
        overall_avg=overall,
        notes=notes,
    )
