"""Per-group sliding windows with OR-rule labels, class weights, and batch dumps."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import FORMAT_VERSION
from .errors import ConfigError, DataError
from .preprocessing import PreparedRecord

SEQ_MAGIC = b"TFSEQ"


@dataclass(frozen=True)
class SequencerConfig:
    L: int = 8
    stride: int = 4

    def __post_init__(self):
        if self.L < 1:
            raise ConfigError(f"sequencer.L must be >= 1, got {self.L}")
        if self.stride < 1:
            raise ConfigError(f"sequencer.stride must be >= 1, got {self.stride}")


@dataclass(frozen=True, eq=False)
class SequenceSample:
    X: np.ndarray             # (L, 2d) float32: standardized block then mask block
    cats: np.ndarray          # (L, n_cat) int64
    y: int
    group_key: str
    window_start_time: float
    window_end_time: float
    source_indices: tuple[int, ...]
    attack_categories: tuple[str, ...] = ()


@dataclass(frozen=True)
class ClassWeights:
    w0: float
    w1: float


def build_sequences(prepared: Sequence[PreparedRecord], config: SequencerConfig) -> list[SequenceSample]:
    groups: dict[str, list[PreparedRecord]] = {}
    for rec in prepared:
        groups.setdefault(rec.group_key, []).append(rec)

    L, s = config.L, config.stride
    out = []
    for key, recs in groups.items():
        # sorted() is stable, so equal timestamps keep input order
        recs = sorted(recs, key=lambda r: r.timestamp)
        if len(recs) < L:
            continue
        x = np.stack([np.concatenate([r.x_hat, r.mask.astype(np.float32)]) for r in recs])
        cats = np.array([r.cat_indices for r in recs], dtype=np.int64).reshape(len(recs), -1)
        for start in range(0, len(recs) - L + 1, s):
            window = recs[start:start + L]
            out.append(SequenceSample(
                X=x[start:start + L].copy(),
                cats=cats[start:start + L].copy(),
                y=max(r.label for r in window),
                group_key=key,
                window_start_time=window[0].timestamp,
                window_end_time=window[-1].timestamp,
                source_indices=tuple(r.index for r in window),
                attack_categories=tuple(sorted({r.attack_category for r in window if r.attack_category})),
            ))
    return out


def expected_window_count(n: int, L: int, stride: int) -> int:
    return max(0, (n - L) // stride + 1)


def class_weights(labels: Sequence[int]) -> ClassWeights:
    """Inverse-frequency weights: w_c = N / (2 N_c)."""
    labels = np.asarray(labels)
    n = labels.size
    n1 = int((labels == 1).sum())
    n0 = n - n1
    if n1 == 0 or n0 == 0:
        raise DataError(f"class weights need both classes, got N0={n0}, N1={n1}")
    return ClassWeights(w0=n / (2 * n0), w1=n / (2 * n1))


def stack(samples: Sequence[SequenceSample], L: Optional[int] = None, d_in: Optional[int] = None,
          n_cat: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack samples into (X: N×L×d', cats: N×L×n_cat, y: N) arrays."""
    if not samples:
        if L is None or d_in is None:
            raise DataError("empty sample list needs explicit L and d_in to stack")
        return (np.zeros((0, L, d_in), np.float32), np.zeros((0, L, n_cat), np.int64),
                np.zeros(0, np.int64))
    return (np.stack([s.X for s in samples]).astype(np.float32),
            np.stack([s.cats for s in samples]).astype(np.int64),
            np.array([s.y for s in samples], dtype=np.int64))


def write_sequence_dump(path: Path, samples: Sequence[SequenceSample], L: int, d_in: int, n_cat: int,
                        metadata: Optional[dict] = None) -> None:
    """Binary container (X float32 LE row-major, cats int32 LE) plus a JSON sidecar.

    `metadata` entries (e.g. a config hash) are stored in the sidecar.
    """
    path = Path(path)
    X, cats, y = stack(samples, L, d_in, n_cat)
    with open(path, "wb") as fh:
        fh.write(SEQ_MAGIC)
        fh.write(struct.pack("<IIIII", FORMAT_VERSION, len(samples), L, d_in, n_cat))
        fh.write(X.astype("<f4").tobytes(order="C"))
        fh.write(cats.astype("<i4").tobytes(order="C"))
    sidecar = {
        "format_version": FORMAT_VERSION,
        "n": len(samples), "L": L, "d_in": d_in, "n_cat": n_cat,
        "y": y.tolist(),
        "group_key": [s.group_key for s in samples],
        "window_start_time": [s.window_start_time for s in samples],
        "window_end_time": [s.window_end_time for s in samples],
        "source_indices": [list(s.source_indices) for s in samples],
        "attack_categories": [list(s.attack_categories) for s in samples],
        **(metadata or {}),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=1))


def read_sequence_dump(path: Path) -> list[SequenceSample]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:len(SEQ_MAGIC)] != SEQ_MAGIC:
        raise DataError(f"{path} is not a sequence dump")
    off = len(SEQ_MAGIC)
    version, n, L, d_in, n_cat = struct.unpack_from("<IIIII", blob, off)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported sequence dump version {version}")
    off += 20
    X = np.frombuffer(blob, "<f4", n * L * d_in, off).reshape(n, L, d_in)
    off += X.nbytes
    cats = np.frombuffer(blob, "<i4", n * L * n_cat, off).reshape(n, L, n_cat)
    side = json.loads(path.with_suffix(".json").read_text())
    if side["n"] != n:
        raise DataError(f"{path}: sidecar lists {side['n']} samples, container has {n}")
    return [
        SequenceSample(
            X=X[i].astype(np.float32), cats=cats[i].astype(np.int64), y=int(side["y"][i]),
            group_key=side["group_key"][i], window_start_time=side["window_start_time"][i],
            window_end_time=side["window_end_time"][i],
            source_indices=tuple(side["source_indices"][i]),
            attack_categories=tuple(side["attack_categories"][i]),
        )
        for i in range(n)
    ]
