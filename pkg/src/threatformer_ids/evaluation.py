"""Ranking metrics and the evaluation protocols (chrono, zero-day, robustness, drift)."""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from . import FORMAT_VERSION
from .errors import DataError
from .model import ThreatFormer
from .sequencing import SequenceSample, stack
from .training import apply_delta, pgd_perturb


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.size} vs {y.size}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return s, y


def _operating_points(s: np.ndarray, y: np.ndarray):
    """Cumulative (tp, fp, threshold) at each distinct score, descending.

    Predicting positive means score >= threshold. A leading point at +inf
    (nothing flagged) is included.
    """
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    last = np.r_[np.flatnonzero(np.diff(s_sorted)), s.size - 1]
    return (np.r_[0, tp[last]], np.r_[0, fp[last]], np.r_[np.inf, s_sorted[last]])


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted 1/2."""
    s, y = _check(scores, labels)
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise DataError("roc_auc needs both classes")
    ranks = _average_ranks(s)
    return float((ranks[y == 1].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def _average_ranks(s: np.ndarray) -> np.ndarray:
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size)
    sorted_s = s[order]
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_s)) + 1]
    ends = np.r_[starts[1:], s.size]
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = (a + b + 1) / 2
    return ranks


def pr_auc(scores, labels) -> float:
    """Average precision: sum over thresholds of (recall step) x precision."""
    s, y = _check(scores, labels)
    n1 = int(y.sum())
    if n1 == 0:
        raise DataError("pr_auc needs at least one positive")
    tp, fp, _ = _operating_points(s, y)
    recall_step = np.diff(tp) / n1
    precision = tp[1:] / (tp[1:] + fp[1:])
    return float(np.sum(recall_step * precision))


def _count_bound(x: float, rounding) -> int:
    """Integer count bound for a rate limit, so 0.8 * 5 means 4 despite binary rounding."""
    return int(rounding(round(x, 9)))


def recall_at_fpr(scores, labels, fpr_cap: float = 0.01, return_threshold: bool = False):
    """Best TPR among thresholds with empirical FPR <= fpr_cap (no interpolation)."""
    s, y = _check(scores, labels)
    n1 = int(y.sum())
    n0 = y.size - n1
    if n0 == 0:
        raise DataError("recall_at_fpr needs negatives")
    if n0 < 1 / fpr_cap:
        warnings.warn(f"only {n0} negatives: FPR cap {fpr_cap} is reachable only at FPR=0", stacklevel=2)
    tp, fp, thr = _operating_points(s, y)
    ok = fp <= _count_bound(fpr_cap * n0, math.floor)
    tpr = tp / n1 if n1 else np.zeros_like(tp, dtype=float)
    k = int(np.flatnonzero(ok)[-1])  # fp is non-decreasing, so the last admissible point has max TPR
    value = float(tpr[k])
    return (value, float(thr[k])) if return_threshold else value


def fpr_at_tpr(scores, labels, tpr_floor: float = 0.95) -> float:
    s, y = _check(scores, labels)
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0:
        raise DataError("fpr_at_tpr needs positives")
    tp, fp, _ = _operating_points(s, y)
    ok = tp >= _count_bound(tpr_floor * n1, math.ceil)
    if n0 == 0:
        return 0.0
    return float((fp[ok] / n0).min())


def f1_at(scores, labels, threshold: float) -> float:
    s, y = _check(scores, labels)
    pred = s >= threshold
    tp = int((pred & (y == 1)).sum())
    fp = int((pred & (y == 0)).sum())
    fn = int((~pred & (y == 1)).sum())
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def best_f1_threshold(scores, labels) -> tuple[float, float]:
    """Threshold (largest among ties) maximizing F1, and that F1."""
    s, y = _check(scores, labels)
    n1 = int(y.sum())
    tp, fp, thr = _operating_points(s, y)
    f1 = np.where(tp > 0, 2 * tp / np.maximum(tp + fp + n1, 1), 0.0)
    k = int(np.argmax(f1))
    return float(thr[k]), float(f1[k])


def f1_at_threshold(scores, labels, threshold_policy="val_best", val_scores=None, val_labels=None,
                    ) -> tuple[float, float]:
    """F1 on (scores, labels) at a policy-chosen threshold; returns (f1, threshold).

    'val_best' picks the F1-maximizing threshold on the validation arrays and
    freezes it; a float policy is used as the threshold directly.
    """
    if threshold_policy == "val_best":
        if val_scores is None or val_labels is None:
            raise ValueError("val_best policy needs validation scores and labels")
        threshold, _ = best_f1_threshold(val_scores, val_labels)
    else:
        threshold = float(threshold_policy)
    return f1_at(scores, labels, threshold), threshold


@dataclass
class EvalReport:
    protocol: str
    n_pos: int
    n_neg: int
    auc_roc: Optional[float]
    auc_pr: Optional[float]
    recall_at_fpr: Optional[float]
    fpr_at_tpr: Optional[float]
    f1: Optional[float]
    threshold: Optional[float]
    fpr_cap: float = 0.01
    tpr_floor: float = 0.95
    seed: Optional[int] = None
    threshold_policy: str = "val_best"
    warnings: list[str] = field(default_factory=list)
    latency_ms_per_seq: Optional[dict] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["format_version"] = FORMAT_VERSION
        return d


def metric_suite(scores, labels, protocol: str, val_scores=None, val_labels=None, fpr_cap=0.01,
                 tpr_floor=0.95, seed=None) -> EvalReport:
    s, y = _check(scores, labels)
    n1 = int(y.sum())
    n0 = y.size - n1
    notes = []
    both = n1 > 0 and n0 > 0
    if not both:
        notes.append("evaluation set lacks one class; ranking metrics undefined")
    f1 = threshold = None
    policy = "val_best"
    if both and val_scores is not None and len(np.unique(val_labels)) == 2:
        f1, threshold = f1_at_threshold(s, y, "val_best", val_scores, val_labels)
    elif both:
        policy = "self_best"
        notes.append("validation lacks a class; F1 threshold chosen on the evaluation set")
        threshold, f1 = best_f1_threshold(s, y)
    rec = None
    if n0:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            rec = recall_at_fpr(s, y, fpr_cap) if n1 else None
        notes += [str(w.message) for w in caught]
    return EvalReport(
        protocol=protocol, n_pos=n1, n_neg=n0,
        auc_roc=roc_auc(s, y) if both else None,
        auc_pr=pr_auc(s, y) if n1 else None,
        recall_at_fpr=rec,
        fpr_at_tpr=fpr_at_tpr(s, y, tpr_floor) if both else None,
        f1=f1, threshold=threshold, fpr_cap=fpr_cap, tpr_floor=tpr_floor, seed=seed,
        threshold_policy=policy, warnings=notes,
    )


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s, y = _check(scores, labels)
    tp, fp, _ = _operating_points(s, y)
    return fp / max(1, y.size - y.sum()), tp / max(1, y.sum())


def pr_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s, y = _check(scores, labels)
    tp, fp, _ = _operating_points(s, y)
    tp, fp = tp[1:], fp[1:]
    return tp / max(1, y.sum()), tp / (tp + fp)


@dataclass
class RobustnessCurve:
    epsilons: list[float]
    auc_pr: list[float]
    steps: int
    step_ratio: float

    def __post_init__(self):
        if not self.epsilons or self.epsilons[0] != 0 or any(
                b <= a for a, b in zip(self.epsilons, self.epsilons[1:])):
            raise ValueError("epsilon list must start at 0 and be strictly increasing")

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, **asdict(self)}


def _tensors(samples: Sequence[SequenceSample]):
    X, C, y = stack(samples)
    return torch.from_numpy(X), torch.from_numpy(C), y


def perturbed_scores(model: ThreatFormer, X: torch.Tensor, C: torch.Tensor, y: np.ndarray,
                     epsilon: float, steps: int, step_size: float, w0: float = 1.0, w1: float = 1.0,
                     batch_size: int = 256) -> np.ndarray:
    if epsilon == 0:
        return model.predict(X, C)
    yt = torch.from_numpy(np.asarray(y))
    out = []
    for i in range(0, len(X), batch_size):
        Xb, Cb = X[i:i + batch_size], C[i:i + batch_size]
        delta = pgd_perturb(lambda z: model.score(model.encode(z, Cb)), Xb, yt[i:i + batch_size],
                            epsilon, steps, step_size, w0, w1, model.config.n_continuous)
        with torch.no_grad():
            out.append(model(apply_delta(Xb, delta), Cb).numpy())
    return np.concatenate(out)


def robustness_eval(model: ThreatFormer, samples: Sequence[SequenceSample], epsilons: Sequence[float],
                    steps: int = 10, step_ratio: float = 0.25, weights=(1.0, 1.0)) -> RobustnessCurve:
    """AUC-PR under PGD at each budget; step size is epsilon * step_ratio."""
    eps = [float(e) for e in epsilons]
    RobustnessCurve(eps, [], steps, step_ratio)  # validates the list before doing work
    X, C, y = _tensors(samples)
    values = [pr_auc(perturbed_scores(model, X, C, y, e, steps, e * step_ratio, *weights), y) for e in eps]
    return RobustnessCurve(eps, values, steps, step_ratio)


@dataclass
class DriftBlock:
    start_time: float
    end_time: float
    n: int
    n_pos: int
    auc_pr: Optional[float]


def drift_blocks(model: ThreatFormer, samples: Sequence[SequenceSample], n_blocks: int,
                 scores: Optional[np.ndarray] = None) -> list[DriftBlock]:
    """Split samples into equal-count contiguous time blocks and score each."""
    if n_blocks < 1:
        raise ValueError("n_blocks must be >= 1")
    if not samples:
        raise DataError("drift analysis needs test sequences")
    if scores is None:
        X, C, _ = _tensors(samples)
        scores = model.predict(X, C)
    y = np.array([s.y for s in samples])
    order = np.argsort([s.window_end_time for s in samples], kind="mergesort")
    blocks = []
    for chunk in np.array_split(order, n_blocks):
        if chunk.size == 0:
            continue
        yb = y[chunk]
        both = 0 < yb.sum() < yb.size
        blocks.append(DriftBlock(
            start_time=min(samples[i].window_start_time for i in chunk),
            end_time=max(samples[i].window_end_time for i in chunk),
            n=int(chunk.size), n_pos=int(yb.sum()),
            auc_pr=pr_auc(scores[chunk], yb) if both else None,
        ))
    return blocks


def measure_latency(model: ThreatFormer, samples: Sequence[SequenceSample], batch_size: int = 64,
                    n_batches: int = 20) -> tuple[float, float]:
    """Mean and std of per-sequence inference time (ms) over timed batches, after a warm-up."""
    X, C, _ = _tensors(samples)
    if len(X) == 0:
        raise DataError("latency measurement needs sequences")
    reps = math.ceil(batch_size * (n_batches + 1) / len(X))
    X, C = X.repeat(reps, 1, 1), C.repeat(reps, 1, 1)
    per_seq = []
    with torch.no_grad():
        model(X[:batch_size], C[:batch_size])
        for b in range(1, n_batches + 1):
            Xb, Cb = X[b * batch_size:(b + 1) * batch_size], C[b * batch_size:(b + 1) * batch_size]
            t0 = time.perf_counter()
            model(Xb, Cb)
            per_seq.append((time.perf_counter() - t0) * 1000 / len(Xb))
    return float(np.mean(per_seq)), float(np.std(per_seq))
