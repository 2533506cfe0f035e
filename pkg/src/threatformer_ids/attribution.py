"""Integrated Gradients over (time step x feature) for sequence scores."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch

from . import FORMAT_VERSION
from . import autodiff as ad
from .errors import ConfigError
from .model import ThreatFormer


@dataclass(frozen=True)
class AttributionConfig:
    baseline: Union[str, np.ndarray] = "mean"
    m_steps: int = 64
    check_completeness: bool = True
    chunk_size: int = 128

    def __post_init__(self):
        if self.m_steps < 1:
            raise ConfigError(f"attribution m_steps must be >= 1, got {self.m_steps}")
        if isinstance(self.baseline, str) and self.baseline not in ("mean", "zeros"):
            raise ConfigError(f"attribution baseline must be 'mean', 'zeros' or a matrix, got {self.baseline!r}")


@dataclass
class AttributionMap:
    A: np.ndarray                     # (L, d_in)
    score: float
    baseline_score: float
    completeness_gap: float
    categorical: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))  # (L, n_cat)
    feature_names: Optional[list[str]] = None
    categorical_names: Optional[list[str]] = None
    m_steps: int = 0

    @property
    def total(self) -> float:
        return float(self.A.sum() + self.categorical.sum())

    def column_names(self) -> list[str]:
        names = self.feature_names or [f"x{j}" for j in range(self.A.shape[1])]
        n_cat = self.categorical.shape[1] if self.categorical.size else 0
        cats = self.categorical_names or [f"cat{j}" for j in range(n_cat)]
        return list(names) + list(cats[:n_cat])

    def matrix(self) -> np.ndarray:
        if self.categorical.size:
            return np.concatenate([self.A, self.categorical], axis=1)
        return self.A


def baseline_matrix(shape: tuple[int, int], n_continuous: int, baseline="mean") -> np.ndarray:
    """'mean' = standardized training mean with every mask bit set to observed."""
    if isinstance(baseline, str):
        X0 = np.zeros(shape, dtype=np.float32)
        if baseline == "mean":
            X0[:, n_continuous:] = 1.0
        return X0
    X0 = np.asarray(baseline, dtype=np.float32)
    if X0.shape != tuple(shape):
        raise ValueError(f"custom baseline has shape {X0.shape}, input is {tuple(shape)}")
    return X0


def _path_gradients(fn: Callable, inputs: Sequence[torch.Tensor], baselines: Sequence[torch.Tensor],
                    m: int, chunk: int) -> tuple[list[torch.Tensor], float, float]:
    """Mean gradient over right-endpoint points k/m, k=1..m, plus end-point scores."""
    totals = [torch.zeros_like(x) for x in inputs]
    alphas = torch.arange(1, m + 1, dtype=ad.DTYPE) / m
    for start in range(0, m, chunk):
        a = alphas[start:start + chunk]
        pts = []
        for x, x0 in zip(inputs, baselines):
            shape = (-1,) + (1,) * x.dim()
            p = (x0[None] + a.reshape(shape) * (x - x0)[None]).detach().requires_grad_(True)
            pts.append(p)
        out = fn(*pts)
        grads = ad.grad(out.sum(), pts)
        for t, g in zip(totals, grads):
            t += g.sum(dim=0)
    with torch.no_grad():
        s = float(fn(*[x[None] for x in inputs])[0])
        s0 = float(fn(*[x0[None] for x0 in baselines])[0])
    return [t / m for t in totals], s, s0


def integrated_gradients(model, X, cats=None, config: AttributionConfig = AttributionConfig(),
                         feature_names=None, categorical_names=None) -> AttributionMap:
    """IG of the unclamped probability along the straight path from the baseline.

    `model` is a ThreatFormer, or any callable mapping a (B, L, d) batch to B
    probabilities. For a ThreatFormer, categorical columns are attributed in
    embedding space against the UNK embedding and summed to one value per
    column and step.
    """
    X = torch.as_tensor(np.asarray(X, dtype=np.float32))
    if isinstance(model, ThreatFormer):
        n_cont = model.config.n_continuous
    else:
        n_cont = X.shape[-1]
    X0 = torch.from_numpy(baseline_matrix(tuple(X.shape), n_cont, config.baseline))

    if isinstance(model, ThreatFormer) and model.n_cat:
        cats = torch.as_tensor(np.asarray(cats), dtype=torch.int64)
        with torch.no_grad():
            E = model.embed_categories(cats[None], (1, X.shape[0]))[0]
            E0 = model.embed_categories(torch.zeros_like(cats)[None], (1, X.shape[0]))[0]

        def fn(x, e):
            return model.score(model.encode(x, embedded=e), clamp=False)

        (gX, gE), s, s0 = _path_gradients(fn, [X, E], [X0, E0], config.m_steps, config.chunk_size)
        contrib = ((E - E0) * gE).numpy()
        bounds = np.cumsum((0,) + model.config.cat_embed_dims)
        A_cat = np.stack([contrib[:, a:b].sum(axis=1) for a, b in zip(bounds[:-1], bounds[1:])], axis=1)
    else:
        if isinstance(model, ThreatFormer):
            def fn(x):
                return model.score(model.encode(x), clamp=False)
        else:
            fn = model
        (gX,), s, s0 = _path_gradients(fn, [X], [X0], config.m_steps, config.chunk_size)
        A_cat = np.zeros((X.shape[0], 0), dtype=np.float32)

    A = ((X - X0) * gX).numpy()
    gap = abs(float(A.sum(dtype=np.float64) + A_cat.sum(dtype=np.float64)) - (s - s0))
    return AttributionMap(A=A, score=s, baseline_score=s0, completeness_gap=gap,
                          categorical=A_cat.astype(np.float32), feature_names=feature_names,
                          categorical_names=categorical_names, m_steps=config.m_steps)


def top_k(amap: AttributionMap, k: int) -> list[tuple[int, str, float]]:
    """The k cells with largest |attribution| as (time index, column name, value)."""
    M = amap.matrix()
    names = amap.column_names()
    flat = np.argsort(-np.abs(M), axis=None, kind="mergesort")[:k]
    return [(int(i // M.shape[1]), names[i % M.shape[1]], float(M.flat[i])) for i in flat]


def export_attribution(amap: AttributionMap, fmt: str = "json", metadata: Optional[dict] = None) -> str:
    """CSV (header = column names, one row per step) or JSON; `metadata` goes into the JSON only."""
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(amap.column_names())
        for row in amap.matrix():
            writer.writerow([repr(float(v)) for v in row])
        return buf.getvalue()
    if fmt == "json":
        doc = {
            "format_version": FORMAT_VERSION,
            "columns": amap.column_names(),
            "feature_names": amap.column_names()[:amap.A.shape[1]],
            "A": amap.A.astype(float).tolist(),
            "categorical": amap.categorical.astype(float).tolist(),
            "score": amap.score,
            "baseline_score": amap.baseline_score,
            "completeness_gap": amap.completeness_gap,
            "m_steps": amap.m_steps,
            **(metadata or {}),
        }
        return json.dumps(doc, indent=1)
    raise ValueError(f"unknown attribution export format {fmt!r}")


def attribution_from_json(text: str) -> AttributionMap:
    doc = json.loads(text)
    A = np.asarray(doc["A"], dtype=np.float32)
    cat = np.asarray(doc["categorical"], dtype=np.float32).reshape(A.shape[0], -1)
    names = doc["columns"]
    return AttributionMap(A=A, score=doc["score"], baseline_score=doc["baseline_score"],
                          completeness_gap=doc["completeness_gap"], categorical=cat,
                          feature_names=names[:A.shape[1]], categorical_names=names[A.shape[1]:],
                          m_steps=doc["m_steps"])
