"""ThreatFormer: pre-norm Transformer encoder with score and reconstruction heads."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from . import FORMAT_VERSION
from . import autodiff as ad
from .errors import ConfigError, DataError

PROB_CLAMP = 1e-7
CHECKPOINT_MAGIC = b"TFIDS"


@dataclass(frozen=True)
class ModelConfig:
    d_in: int
    n_continuous: Optional[int] = None
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    dropout_rate: float = 0.1
    cat_vocab_sizes: tuple[int, ...] = ()
    cat_embed_dims: tuple[int, ...] = ()
    pooling: str = "mean"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cat_vocab_sizes", tuple(int(v) for v in self.cat_vocab_sizes))
        dims = tuple(int(v) for v in self.cat_embed_dims) or (4,) * len(self.cat_vocab_sizes)
        object.__setattr__(self, "cat_embed_dims", dims)
        if self.n_continuous is None:
            object.__setattr__(self, "n_continuous", self.d_in)
        if self.d_in < 1 or not 0 < self.n_continuous <= self.d_in:
            raise ConfigError(f"model needs d_in >= 1 and 0 < n_continuous <= d_in, "
                              f"got {self.d_in}, {self.n_continuous}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"model.d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"model.dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if len(self.cat_embed_dims) != len(self.cat_vocab_sizes):
            raise ConfigError("model.cat_embed_dims needs one entry per categorical column")
        if self.pooling not in ("mean", "cls"):
            raise ConfigError(f"model.pooling must be 'mean' or 'cls', got {self.pooling!r}")
        if self.n_layers < 0 or self.d_ff < 1:
            raise ConfigError("model.n_layers must be >= 0 and model.d_ff >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cat_vocab_sizes"] = list(self.cat_vocab_sizes)
        d["cat_embed_dims"] = list(self.cat_embed_dims)
        return d


def sinusoidal_positions(length: int, width: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    rate = torch.exp(-math.log(10000.0) * torch.arange(0, width, 2, dtype=torch.float64) / width)
    pe = torch.zeros(length, width, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * rate)
    pe[:, 1::2] = torch.cos(pos * rate)[:, : width // 2]
    return pe.to(ad.DTYPE)


class EncoderBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1_g = nn.Parameter(torch.empty(d_model))
        self.ln1_b = nn.Parameter(torch.empty(d_model))
        for name in ("q", "k", "v", "o"):
            setattr(self, f"w{name}", nn.Parameter(torch.empty(d_model, d_model)))
            setattr(self, f"b{name}", nn.Parameter(torch.empty(d_model)))
        self.ln2_g = nn.Parameter(torch.empty(d_model))
        self.ln2_b = nn.Parameter(torch.empty(d_model))
        self.w1 = nn.Parameter(torch.empty(d_model, d_ff))
        self.b1 = nn.Parameter(torch.empty(d_ff))
        self.w2 = nn.Parameter(torch.empty(d_ff, d_model))
        self.b2 = nn.Parameter(torch.empty(d_model))

    def attention(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        B, T, D = h.shape
        dh = D // self.n_heads

        def heads(t):
            return t.reshape(B, T, self.n_heads, dh).transpose(1, 2)

        q = heads(ad.linear(h, self.wq, self.bq))
        k = heads(ad.linear(h, self.wk, self.bk))
        v = heads(ad.linear(h, self.wv, self.bv))
        weights = ad.softmax(ad.matmul(q, k.transpose(-1, -2)) / math.sqrt(dh), axis=-1)
        ctx = ad.matmul(weights, v).transpose(1, 2).reshape(B, T, D)
        return ad.linear(ctx, self.wo, self.bo), weights

    def forward(self, h, rate, generator, train):
        a, weights = self.attention(ad.layer_norm(h, self.ln1_g, self.ln1_b))
        h = h + ad.dropout(a, rate, generator, train)
        f = ad.linear(ad.gelu(ad.linear(ad.layer_norm(h, self.ln2_g, self.ln2_b), self.w1, self.b1)),
                      self.w2, self.b2)
        h = h + ad.dropout(f, rate, generator, train)
        return h, weights


class ThreatFormer(nn.Module):
    """Per-step input is [standardized features | mask bits | categorical embeddings].

    `encode` returns one representation per step (plus a leading CLS slot when
    pooling='cls'); `score` pools them into a probability and `reconstruct`
    maps each step back to the d_in input width.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.embeddings = nn.ParameterList(
            [nn.Parameter(torch.empty(v, e)) for v, e in zip(c.cat_vocab_sizes, c.cat_embed_dims)])
        self.w_in = nn.Parameter(torch.empty(c.d_in + sum(c.cat_embed_dims), c.d_model))
        self.b_in = nn.Parameter(torch.empty(c.d_model))
        if c.pooling == "cls":
            self.cls_token = nn.Parameter(torch.empty(c.d_model))
        self.blocks = nn.ModuleList([EncoderBlock(c.d_model, c.n_heads, c.d_ff) for _ in range(c.n_layers)])
        self.lnf_g = nn.Parameter(torch.empty(c.d_model))
        self.lnf_b = nn.Parameter(torch.empty(c.d_model))
        self.w_score = nn.Parameter(torch.empty(c.d_model, 1))
        self.b_score = nn.Parameter(torch.empty(1))
        self.w_rec = nn.Parameter(torch.empty(c.d_model, c.d_in))
        self.b_rec = nn.Parameter(torch.empty(c.d_in))
        init_params(self, c.seed)

    @property
    def n_cat(self) -> int:
        return len(self.config.cat_vocab_sizes)

    def embed_categories(self, cats: Optional[torch.Tensor], batch_shape) -> torch.Tensor:
        if not self.n_cat:
            return torch.zeros(*batch_shape, 0)
        if cats is None or cats.shape[-1] != self.n_cat:
            raise ValueError(f"expected categorical indices with {self.n_cat} columns")
        return torch.cat([ad.embedding_lookup(t, cats[..., j]) for j, t in enumerate(self.embeddings)], dim=-1)

    def encode(self, X: torch.Tensor, cats: Optional[torch.Tensor] = None, train: bool = False,
               generator: Optional[torch.Generator] = None, embedded: Optional[torch.Tensor] = None,
               return_attention: bool = False):
        c = self.config
        if X.dim() != 3 or X.shape[-1] != c.d_in:
            raise ValueError(f"encode expects (B, L, {c.d_in}) input, got {tuple(X.shape)}")
        B, L, _ = X.shape
        if embedded is None:
            embedded = self.embed_categories(cats, (B, L))
        h = ad.linear(torch.cat([X, embedded], dim=-1), self.w_in, self.b_in)
        h = h + sinusoidal_positions(L, c.d_model)
        if c.pooling == "cls":
            h = torch.cat([self.cls_token.expand(B, 1, -1), h], dim=1)
        h = ad.dropout(h, c.dropout_rate, generator, train)
        attention = []
        for block in self.blocks:
            h, w = block(h, c.dropout_rate, generator, train)
            attention.append(w)
        h = ad.layer_norm(h, self.lnf_g, self.lnf_b)
        return (h, attention) if return_attention else h

    def logit(self, H: torch.Tensor) -> torch.Tensor:
        pooled = H[:, 0] if self.config.pooling == "cls" else ad.mean(H, axis=1)
        return ad.linear(pooled, self.w_score, self.b_score)[:, 0]

    def score(self, H: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        s = ad.sigmoid(self.logit(H))
        return torch.clamp(s, PROB_CLAMP, 1 - PROB_CLAMP) if clamp else s

    def reconstruct(self, H: torch.Tensor) -> torch.Tensor:
        steps = H[:, 1:] if self.config.pooling == "cls" else H
        return ad.linear(steps, self.w_rec, self.b_rec)

    def forward(self, X: torch.Tensor, cats: Optional[torch.Tensor] = None, clamp: bool = True) -> torch.Tensor:
        """Eval-mode probability for a batch."""
        return self.score(self.encode(X, cats), clamp=clamp)

    @torch.no_grad()
    def predict(self, X, cats=None, batch_size: int = 512) -> np.ndarray:
        X = torch.as_tensor(np.asarray(X), dtype=ad.DTYPE)
        cats = None if cats is None else torch.as_tensor(np.asarray(cats), dtype=torch.int64)
        out = [self(X[i:i + batch_size], None if cats is None else cats[i:i + batch_size])
               for i in range(0, len(X), batch_size)]
        return torch.cat(out).numpy() if out else np.zeros(0, np.float32)


def _fan_in(params: dict, name: str) -> int:
    prefix, _, leaf = name.rpartition(".")
    p = params[name]
    if name.startswith("embeddings."):
        return p.shape[1]
    if p.dim() == 2:
        return p.shape[0]
    if leaf == "cls_token":
        return p.shape[0]
    weight = ".".join(filter(None, [prefix, "w" + leaf[1:]]))
    return params[weight].shape[0]


def init_params(model: ThreatFormer, seed: int) -> ThreatFormer:
    """Seeded uniform init with bound 1/sqrt(fan_in); layer-norm gains 1, shifts 0.

    A bias shares the fan-in of its weight matrix.
    """
    g = torch.Generator().manual_seed(int(seed))
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, p in params.items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.startswith("ln"):
                p.fill_(1.0 if leaf.endswith("_g") else 0.0)
                continue
            bound = 1.0 / math.sqrt(_fan_in(params, name))
            p.uniform_(-bound, bound, generator=g)
    return model


def build_model(config: ModelConfig) -> ThreatFormer:
    return ThreatFormer(config)


def save_checkpoint(path, model: ThreatFormer, header: Optional[dict] = None) -> None:
    """Write magic, version, JSON header, then (name, shape, float32 LE data) blobs."""
    doc = {"format_version": FORMAT_VERSION, "model_config": model.config.to_dict(), **(header or {})}
    head = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    state = model.state_dict()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(head)))
        fh.write(head)
        fh.write(struct.pack("<I", len(state)))
        for name, t in state.items():
            raw = name.encode()
            fh.write(struct.pack("<HB", len(raw), t.dim()))
            fh.write(raw)
            fh.write(struct.pack(f"<{t.dim()}I", *t.shape))
            fh.write(t.detach().numpy().astype("<f4").tobytes(order="C"))


def load_checkpoint(path) -> tuple[ThreatFormer, dict]:
    blob = Path(path).read_bytes()
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"{path} is not a ThreatFormer checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, head_len = struct.unpack_from("<IQ", blob, off)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off += 12
    header = json.loads(blob[off:off + head_len])
    off += head_len
    model = ThreatFormer(ModelConfig(**header["model_config"]))
    expected = model.state_dict()
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    loaded = {}
    for _ in range(count):
        name_len, ndim = struct.unpack_from("<HB", blob, off)
        off += 3
        name = blob[off:off + name_len].decode()
        off += name_len
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        if name not in expected:
            raise DataError(f"{path}: unexpected tensor {name!r}")
        if tuple(expected[name].shape) != tuple(shape):
            raise DataError(f"{path}: tensor {name!r} has shape {shape}, "
                            f"config implies {tuple(expected[name].shape)}")
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, "<f4", n, off).reshape(shape)
        off += 4 * n
        loaded[name] = torch.from_numpy(arr.astype(np.float32))
    missing = set(expected) - set(loaded)
    if missing:
        raise DataError(f"{path}: checkpoint lacks tensors {sorted(missing)}")
    model.load_state_dict(loaded)
    return model, header
