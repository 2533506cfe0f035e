"""Objectives and the training loop: weighted BCE + masked reconstruction + PGD."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import autodiff as ad
from .errors import ConfigError, DataError, NumericalError
from .model import ModelConfig, ThreatFormer
from .sequencing import ClassWeights, SequenceSample, stack

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.02
    lambda_ssl: float = 0.5
    mask_ratio: float = 0.15
    ssl_masked_only: bool = False
    adv_epsilon: float = 0.25
    adv_steps: int = 4
    adv_step_size: Optional[float] = None     # None -> epsilon / 4
    optimizer: str = "sgd_momentum"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("train.epochs must be >= 0 and train.batch_size >= 1")
        if not self.learning_rate > 0:
            raise ConfigError(f"train.learning_rate must be positive, got {self.learning_rate}")
        if self.lambda_ssl < 0:
            raise ConfigError(f"train.lambda_ssl must be >= 0, got {self.lambda_ssl}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"train.mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.adv_epsilon < 0 or self.adv_steps < 0:
            raise ConfigError("train.adv_epsilon and train.adv_steps must be >= 0")
        if self.adv_step_size is not None and not self.adv_step_size > 0:
            raise ConfigError(f"train.adv_step_size must be positive, got {self.adv_step_size}")
        if self.optimizer not in ("sgd", "sgd_momentum"):
            raise ConfigError(f"train.optimizer must be 'sgd' or 'sgd_momentum', got {self.optimizer!r}")

    @property
    def step_size(self) -> float:
        return self.adv_step_size if self.adv_step_size is not None else self.adv_epsilon / 4

    @property
    def adversarial(self) -> bool:
        return self.adv_epsilon > 0 and self.adv_steps > 0


@dataclass
class EpochRecord:
    epoch: int
    loss_sup: float
    loss_ssl: float
    loss_adv: float
    loss_total: float
    val_auc_pr: Optional[float]


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return {"epochs": [asdict(e) for e in self.epochs], "best_epoch": self.best_epoch}


@dataclass
class TrainResult:
    model: ThreatFormer
    best_model: ThreatFormer
    history: TrainHistory


def wbce(s: torch.Tensor, y: torch.Tensor, w0: float, w1: float) -> torch.Tensor:
    y = y.to(s.dtype)
    return ad.mean(-(w1 * y * ad.log(s) + w0 * (1 - y) * ad.log(1 - s)))


def mask_sequence(X: torch.Tensor, ratio: float, generator: Optional[torch.Generator],
                  n_continuous: Optional[int] = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Zero a Bernoulli(ratio) subset of continuous cells; mask bits are never touched.

    Works on a single L×d_in sequence or a B×L×d_in batch. Returns the masked
    copy and a boolean array marking masked cells.
    """
    n_continuous = X.shape[-1] if n_continuous is None else n_continuous
    positions = torch.zeros(X.shape, dtype=torch.bool)
    if ratio == 0.0:
        return X.clone(), positions
    draw = torch.rand((*X.shape[:-1], n_continuous), generator=generator) < ratio
    positions[..., :n_continuous] = draw
    return X.masked_fill(positions, 0.0), positions


def ssl_loss(X_hat: torch.Tensor, X: torch.Tensor, positions: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Squared Frobenius error per L×d cell, averaged over the batch.

    With `positions`, only masked cells count and the mean is over those cells.
    """
    if X_hat.shape != X.shape:
        raise ValueError(f"ssl_loss shape mismatch: {tuple(X_hat.shape)} vs {tuple(X.shape)}")
    sq = (X_hat - X) ** 2
    if positions is None:
        return ad.mean(sq)
    n = positions.sum()
    return (sq * positions).sum() / n if int(n) else sq.sum() * 0.0


def total_loss(loss_sup, loss_ssl, loss_adv, lambda_ssl: float):
    return loss_sup + lambda_ssl * loss_ssl + loss_adv


def pgd_perturb(score_fn: Callable[[torch.Tensor], torch.Tensor], X: torch.Tensor, y: torch.Tensor,
                epsilon: float, steps: int, step_size: float, w0: float = 1.0, w1: float = 1.0,
                n_continuous: Optional[int] = None) -> torch.Tensor:
    """l-inf PGD on the weighted BCE, starting from delta = 0.

    `score_fn` maps a full input batch to probabilities. The perturbation only
    covers the first `n_continuous` feature columns; the returned delta has
    that width and is detached.
    """
    n_continuous = X.shape[-1] if n_continuous is None else n_continuous
    X = X.detach()
    delta = torch.zeros((*X.shape[:-1], n_continuous), dtype=X.dtype)
    if epsilon == 0 or steps == 0:
        return delta
    pad = X.shape[-1] - n_continuous
    for _ in range(steps):
        delta.requires_grad_(True)
        full = torch.nn.functional.pad(delta, (0, pad)) if pad else delta
        loss = wbce(score_fn(X + full), y, w0, w1)
        (g,) = ad.grad(loss, [delta])
        with torch.no_grad():
            delta = torch.clamp(delta + step_size * torch.sign(g), -epsilon, epsilon)
        assert float(delta.abs().max()) <= epsilon + 1e-7
    return delta.detach()


def apply_delta(X: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    pad = X.shape[-1] - delta.shape[-1]
    return X + (torch.nn.functional.pad(delta, (0, pad)) if pad else delta)


def _evaluate_auc_pr(model: ThreatFormer, X, cats, y) -> Optional[float]:
    from .evaluation import pr_auc

    if len(y) == 0 or y.sum() == 0:
        return None
    return pr_auc(model.predict(X, cats), y)


def train(sequences: Sequence[SequenceSample], val_sequences: Sequence[SequenceSample],
          weights: ClassWeights, model_config: ModelConfig, train_config: TrainConfig,
          model: Optional[ThreatFormer] = None) -> TrainResult:
    """Mini-batch SGD over the combined objective.

    All randomness comes from one generator seeded with `train_config.seed`;
    per batch the draw order is dropout (clean pass), mask, dropout (masked
    pass), dropout (adversarial pass). PGD itself runs without dropout.
    """
    if not sequences:
        raise DataError("training needs at least one sequence")
    X_all, C_all, y_all = stack(sequences)
    if y_all.min() == y_all.max():
        raise DataError("training sequences must contain both classes")
    Xv, Cv, yv = stack(val_sequences, X_all.shape[1], X_all.shape[2], C_all.shape[2])
    X_all = torch.from_numpy(X_all)
    C_all = torch.from_numpy(C_all)
    y_all = torch.from_numpy(y_all)

    tc = train_config
    model = ThreatFormer(model_config) if model is None else model
    gen = torch.Generator().manual_seed(int(tc.seed))
    opt = torch.optim.SGD(model.parameters(), lr=tc.learning_rate,
                          momentum=0.9 if tc.optimizer == "sgd_momentum" else 0.0)
    n_cont = model_config.n_continuous
    history = TrainHistory()
    best_state, best_score = copy.deepcopy(model.state_dict()), -math.inf
    started = time.perf_counter()

    for epoch in range(1, tc.epochs + 1):
        order = torch.randperm(len(X_all), generator=gen)
        sums = np.zeros(4)
        n_seen = 0
        for b, start in enumerate(range(0, len(order), tc.batch_size)):
            idx = order[start:start + tc.batch_size]
            X, C, y = X_all[idx], C_all[idx], y_all[idx]

            loss_sup = wbce(model.score(model.encode(X, C, train=True, generator=gen)), y, weights.w0, weights.w1)
            loss_ssl = torch.zeros(())
            if tc.lambda_ssl > 0:
                Xm, positions = mask_sequence(X, tc.mask_ratio, gen, n_cont)
                X_hat = model.reconstruct(model.encode(Xm, C, train=True, generator=gen))
                loss_ssl = ssl_loss(X_hat, X, positions if tc.ssl_masked_only and tc.mask_ratio > 0 else None)
            loss_adv = torch.zeros(())
            if tc.adversarial:
                delta = pgd_perturb(lambda z: model.score(model.encode(z, C)), X, y, tc.adv_epsilon,
                                    tc.adv_steps, tc.step_size, weights.w0, weights.w1, n_cont)
                s_adv = model.score(model.encode(apply_delta(X, delta), C, train=True, generator=gen))
                loss_adv = wbce(s_adv, y, weights.w0, weights.w1)
            loss = total_loss(loss_sup, loss_ssl, loss_adv, tc.lambda_ssl)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()

            k = len(idx)
            sums += k * np.array([loss_sup.item(), loss_ssl.item(), loss_adv.item(), loss.item()])
            n_seen += k

        val_auc = _evaluate_auc_pr(model, Xv, Cv, yv)
        means = sums / n_seen
        history.epochs.append(EpochRecord(epoch, *map(float, means), val_auc))
        log.info("epoch %d  sup=%.4f ssl=%.4f adv=%.4f total=%.4f val_auc_pr=%s",
                 epoch, *means, "n/a" if val_auc is None else f"{val_auc:.4f}")
        if val_auc is not None and val_auc > best_score:
            best_score, history.best_epoch = val_auc, epoch
            best_state = copy.deepcopy(model.state_dict())

    history.wall_time_s = time.perf_counter() - started
    best = ThreatFormer(model_config)
    best.load_state_dict(best_state if history.best_epoch is not None else model.state_dict())
    return TrainResult(model=model, best_model=best, history=history)
