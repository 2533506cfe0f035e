"""Train-only imputation, standardization and categorical vocabularies."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import FORMAT_VERSION
from .errors import DataError
from .flow_data import FlowRecord, feature_matrix

UNK = "<UNK>"


@dataclass(frozen=True)
class PreprocessStats:
    medians: tuple[float, ...]
    means: tuple[float, ...]
    stds: tuple[float, ...]
    vocabularies: tuple[dict, ...]
    fitted_on: int
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if any(s < 0 for s in self.stds):
            raise ValueError("standard deviations must be nonnegative")
        for vocab in self.vocabularies:
            if vocab.get(UNK) != 0:
                raise ValueError("every vocabulary must map UNK to index 0")

    @property
    def d(self) -> int:
        return len(self.medians)

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "medians": list(self.medians),
            "means": list(self.means),
            "stds": list(self.stds),
            "epsilon": self.epsilon,
            "vocabularies": [list(v) for v in self.vocabularies],
            "fitted_on": self.fitted_on,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PreprocessStats":
        if doc.get("format_version") != FORMAT_VERSION:
            raise DataError(f"unsupported stats version {doc.get('format_version')!r}")
        return cls(
            medians=tuple(doc["medians"]), means=tuple(doc["means"]), stds=tuple(doc["stds"]),
            vocabularies=tuple({tok: i for i, tok in enumerate(v)} for v in doc["vocabularies"]),
            fitted_on=int(doc["fitted_on"]), epsilon=float(doc["epsilon"]),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True, eq=False)
class PreparedRecord:
    x_hat: np.ndarray         # (d,) float32
    mask: np.ndarray          # (d,) uint8, 1 = observed
    cat_indices: tuple[int, ...]
    label: int
    attack_category: Optional[str]
    timestamp: float
    group_key: str
    index: int                # row position in the parsed record list


def fit_stats(train_records: Sequence[FlowRecord], epsilon: float = 1e-8,
              feature_names: Optional[Sequence[str]] = None) -> PreprocessStats:
    if not train_records:
        raise DataError("cannot fit preprocessing statistics on an empty training set")
    raw = feature_matrix(train_records)
    observed = ~np.isnan(raw)
    empty = np.flatnonzero(~observed.any(axis=0))
    if empty.size:
        j = int(empty[0])
        name = feature_names[j] if feature_names else f"feature {j}"
        raise DataError(f"{name} has no observed values in the training period")

    medians = np.array([np.median(raw[observed[:, j], j]) for j in range(raw.shape[1])])
    imputed = np.where(observed, raw, medians)
    means = imputed.mean(axis=0)
    stds = imputed.std(axis=0)

    n_cat = len(train_records[0].categories)
    vocabularies = []
    for j in range(n_cat):
        vocab = {UNK: 0}
        for rec in train_records:
            vocab.setdefault(rec.categories[j], len(vocab))
        vocabularies.append(vocab)

    return PreprocessStats(
        medians=tuple(float(v) for v in medians), means=tuple(float(v) for v in means),
        stds=tuple(float(v) for v in stds), vocabularies=tuple(vocabularies),
        fitted_on=len(train_records), epsilon=epsilon,
    )


def transform(records: Sequence[FlowRecord], stats: PreprocessStats,
              indices: Optional[Sequence[int]] = None) -> list[PreparedRecord]:
    """Impute, standardize and index `records`; `indices` are their source row numbers."""
    if indices is None:
        indices = range(len(records))
    if not records:
        return []
    for rec in records:
        if not isinstance(rec, FlowRecord):
            raise TypeError(f"transform expects FlowRecord inputs, got {type(rec).__name__}")
        if len(rec.features) != stats.d:
            raise DataError(f"record has {len(rec.features)} features, stats expect d={stats.d}")
        if len(rec.categories) != len(stats.vocabularies):
            raise DataError(f"record has {len(rec.categories)} categorical fields, "
                            f"stats expect {len(stats.vocabularies)}")
    raw = feature_matrix(records)
    observed = ~np.isnan(raw)
    imputed = np.where(observed, raw, np.asarray(stats.medians))
    x_hat = ((imputed - np.asarray(stats.means)) / (np.asarray(stats.stds) + stats.epsilon)).astype(np.float32)
    mask = observed.astype(np.uint8)
    return [
        PreparedRecord(
            x_hat=x_hat[k], mask=mask[k],
            cat_indices=tuple(v.get(c, 0) for v, c in zip(stats.vocabularies, rec.categories)),
            label=rec.label, attack_category=rec.attack_category, timestamp=rec.timestamp,
            group_key=rec.group_key, index=int(idx),
        )
        for k, (rec, idx) in enumerate(zip(records, indices))
    ]
