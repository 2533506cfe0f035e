"""Seeded synthetic experiments: reference detection, zero-day hold-out, robustness.

Each helper is the in-process equivalent of a synth -> prepare -> train -> eval
chain, so scripts and tests can compare several training variants on
identical data without going through files.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .evaluation import EvalReport, RobustnessCurve, metric_suite, robustness_eval
from .flow_data import SynthConfig, generate_synthetic
from .pipeline import PreparedData, prepare
from .sequencing import SequencerConfig, class_weights, stack
from .splitting import SplitConfig, cuts_from_fractions
from .training import TrainConfig, TrainResult, train


def reference_data(seed: int, mean_shift: float = 3.0, ood_families: Sequence[str] = (),
                   train_frac: float = 0.6, val_frac: float = 0.2, L: int = 8, stride: int = 4,
                   **synth) -> PreparedData:
    """4 groups x 2000 events, families dos/scan, 60/20/20 chronological split by default."""
    records = generate_synthetic(SynthConfig(seed=seed, mean_shift=mean_shift, **synth))
    t_tr, t_va = cuts_from_fractions(records, train_frac, val_frac)
    return prepare(records, SplitConfig(t_tr, t_va, frozenset(ood_families)), SequencerConfig(L, stride))


def train_on(data: PreparedData, seed: int, model: Optional[dict] = None, **train_kw) -> TrainResult:
    weights = class_weights([s.y for s in data.sequences["train"]])
    return train(data.sequences["train"], data.sequences["val"], weights,
                 data.model_config(seed=seed, **(model or {})), TrainConfig(seed=seed, **train_kw))


def evaluate_part(model, data: PreparedData, part: str, fpr_cap: float = 0.01, seed=None) -> EvalReport:
    protocol = {"test": "chrono", "test_ood": "zero_day"}.get(part, part)
    X, C, y = stack(data.sequences[part])
    Xv, Cv, yv = stack(data.sequences["val"])
    return metric_suite(model.predict(X, C), y, protocol, model.predict(Xv, Cv), yv, fpr_cap=fpr_cap, seed=seed)


@dataclass
class RunSummary:
    seed: int
    variant: dict
    reports: dict[str, EvalReport]
    robustness: Optional[RobustnessCurve] = None
    train_seconds: float = 0.0
    extras: dict = field(default_factory=dict)


def run_variant(data: PreparedData, seed: int, parts: Sequence[str] = ("test",),
                robustness_epsilons: Optional[Sequence[float]] = None, attack_steps: int = 10,
                **train_kw) -> RunSummary:
    t0 = time.perf_counter()
    result = train_on(data, seed, **train_kw)
    elapsed = time.perf_counter() - t0
    model = result.best_model
    reports = {p: evaluate_part(model, data, p, seed=seed) for p in parts}
    curve = None
    if robustness_epsilons is not None:
        curve = robustness_eval(model, data.sequences["test"], robustness_epsilons, steps=attack_steps)
    return RunSummary(seed, dict(train_kw), reports, curve, elapsed)


def format_table(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    cells = [[f"{v:.4f}" if isinstance(v, (float, np.floating)) else str(v) for v in r] for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) for i, h in enumerate(header)]
    line = lambda r: "  ".join(c.rjust(w) for c, w in zip(r, widths))
    return "\n".join([line(header), line(["-" * w for w in widths])] + [line(r) for r in cells])
