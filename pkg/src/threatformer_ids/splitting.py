"""Chronological partitioning and zero-day family hold-out."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import FORMAT_VERSION
from .errors import ConfigError, DataError
from .flow_data import FlowRecord


@dataclass(frozen=True)
class SplitConfig:
    t_tr: float
    t_va: float
    ood_families: frozenset[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "ood_families", frozenset(self.ood_families))
        if not self.t_tr < self.t_va:
            raise ConfigError(f"split cut points need t_tr < t_va, got {self.t_tr} and {self.t_va}")


@dataclass(frozen=True)
class SplitResult:
    config: SplitConfig
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    train_id: tuple[int, ...] = ()
    test_id: tuple[int, ...] = ()
    test_ood_eval: tuple[int, ...] = ()
    warnings: tuple[str, ...] = field(default=())

    def to_manifest(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "t_tr": self.config.t_tr,
            "t_va": self.config.t_va,
            "ood_families": sorted(self.config.ood_families),
            "train": list(self.train),
            "val": list(self.val),
            "test": list(self.test),
            "train_id": list(self.train_id),
            "test_id": list(self.test_id),
            "test_ood_eval": list(self.test_ood_eval),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_manifest(cls, doc: dict) -> "SplitResult":
        if doc.get("format_version") != FORMAT_VERSION:
            raise DataError(f"unsupported split manifest version {doc.get('format_version')!r}")
        config = SplitConfig(doc["t_tr"], doc["t_va"], frozenset(doc["ood_families"]))
        return cls(config, *(tuple(doc[k]) for k in
                             ("train", "val", "test", "train_id", "test_id", "test_ood_eval")),
                   warnings=tuple(doc.get("warnings", ())))


def cuts_from_fractions(records: Sequence[FlowRecord], train_frac: float, val_frac: float) -> tuple[float, float]:
    """Resolve train/val fractions to timestamp cut points (quantiles of all timestamps).

    The cut is the timestamp of the last record inside the fraction, so with
    `<=` semantics the train side receives at least `train_frac` of records.
    """
    if not (0 < train_frac and 0 < val_frac and train_frac + val_frac < 1):
        raise ConfigError(f"split fractions need 0 < train, 0 < val, train + val < 1; got {train_frac}, {val_frac}")
    if not records:
        raise DataError("cannot resolve split cuts on an empty record list")
    ts = np.sort(np.array([r.timestamp for r in records]))
    n = len(ts)
    t_tr = float(ts[max(0, math.ceil(train_frac * n) - 1)])
    t_va = float(ts[max(0, math.ceil((train_frac + val_frac) * n) - 1)])
    if not t_tr < t_va:
        raise ConfigError(f"fractions {train_frac}/{val_frac} collapse to one timestamp {t_tr}")
    return t_tr, t_va


def chronological_split(records: Sequence[FlowRecord], config: SplitConfig) -> SplitResult:
    if not records:
        raise DataError("cannot split an empty record list")
    train, val, test = [], [], []
    for i, rec in enumerate(records):
        if rec.timestamp <= config.t_tr:
            train.append(i)
        elif rec.timestamp <= config.t_va:
            val.append(i)
        else:
            test.append(i)
    warnings = tuple(f"{name} partition is empty" for name, part in
                     (("train", train), ("val", val), ("test", test)) if not part)
    split = SplitResult(config, tuple(train), tuple(val), tuple(test), warnings=warnings)
    return zero_day_filter(records, split, config.ood_families)


def zero_day_filter(records: Sequence[FlowRecord], split: SplitResult,
                    ood_families: Iterable[str]) -> SplitResult:
    """Fill the zero-day subsets.

    train_id drops held-out families from train; test_id drops them from test;
    test_ood_eval keeps test benign traffic plus the held-out families, so that
    ranking metrics have negatives.
    """
    ood = frozenset(ood_families)
    train_id = tuple(i for i in split.train if records[i].attack_category not in ood)
    test_id = tuple(i for i in split.test if records[i].attack_category not in ood)
    test_ood = tuple(i for i in split.test
                     if records[i].label == 0 or records[i].attack_category in ood)
    seen = {r.attack_category for r in records}
    warnings = list(split.warnings)
    warnings += [f"held-out family {f!r} never occurs in the data" for f in sorted(ood - seen)]
    return replace(split, config=replace(split.config, ood_families=ood), train_id=train_id,
                   test_id=test_id, test_ood_eval=test_ood, warnings=tuple(dict.fromkeys(warnings)))
