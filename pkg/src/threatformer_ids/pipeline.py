"""Glue from raw records to model-ready sequence sets, shared by the CLI and scripts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from .flow_data import FlowRecord
from .model import ModelConfig
from .preprocessing import PreprocessStats, fit_stats, transform
from .sequencing import SequencerConfig, SequenceSample, build_sequences
from .splitting import SplitConfig, SplitResult, chronological_split

PARTS = ("train", "val", "test", "test_ood")


@dataclass
class PreparedData:
    stats: PreprocessStats
    split: SplitResult
    sequences: dict[str, list[SequenceSample]]
    d: int
    n_cat: int

    @property
    def d_in(self) -> int:
        return 2 * self.d

    def model_config(self, **overrides) -> ModelConfig:
        return ModelConfig(d_in=self.d_in, n_continuous=self.d,
                           cat_vocab_sizes=tuple(len(v) for v in self.stats.vocabularies), **overrides)


def prepare(records: Sequence[FlowRecord], split_config: SplitConfig, sequencer: SequencerConfig,
            epsilon: float = 1e-8, feature_names: Optional[Sequence[str]] = None) -> PreparedData:
    """Split, fit on the in-distribution train part, and window each part separately.

    Parts: train (= train with held-out families removed), val, test (in-distribution
    test) and test_ood (test benign traffic plus held-out families).
    """
    split = chronological_split(records, split_config)
    train_recs = [records[i] for i in split.train_id]
    stats = fit_stats(train_recs, epsilon=epsilon, feature_names=feature_names)
    index_sets = {"train": split.train_id, "val": split.val, "test": split.test_id,
                  "test_ood": split.test_ood_eval}
    sequences = {}
    for name, idx in index_sets.items():
        prepared = transform([records[i] for i in idx], stats, indices=idx)
        sequences[name] = build_sequences(prepared, sequencer)
    n_cat = len(records[0].categories) if records else 0
    return PreparedData(stats=stats, split=split, sequences=sequences, d=stats.d, n_cat=n_cat)
