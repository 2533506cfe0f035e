"""Tensor ops and gradient queries used by the model, PGD and attribution.

Backed by torch's reverse-mode engine in float32. The op wrappers pin the
numerical conventions the rest of the package relies on (max-subtracted
softmax, floored log, layer-norm variance guard) and check shapes up front.
"""

from __future__ import annotations

from typing import Optional, Sequence

import torch

LOG_FLOOR = 1e-12
LN_EPS = 1e-5
DTYPE = torch.float32


def use_deterministic() -> None:
    torch.use_deterministic_algorithms(True)


def tensor(values, requires_grad: bool = False) -> torch.Tensor:
    return torch.tensor(values, dtype=DTYPE, requires_grad=requires_grad)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def _broadcastable(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ValueError(f"{op} shape mismatch: {tuple(a.shape)} and {tuple(b.shape)}") from None


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcastable(a, b, "add")
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcastable(a, b, "mul")
    return a * b


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """x @ W + b with W stored as (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp_min(x, 0.0)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.gelu(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.clamp_min(x, LOG_FLOOR))


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    """Normalize over the last axis (population variance)."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ValueError(f"layer_norm parameter shapes {tuple(gamma.shape)}/{tuple(beta.shape)} "
                         f"do not match input width {x.shape[-1]}")
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gamma + beta


def embedding_lookup(table: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
    if indices.dtype not in (torch.int32, torch.int64):
        raise TypeError(f"embedding indices must be integers, got {indices.dtype}")
    if indices.numel() and (int(indices.min()) < 0 or int(indices.max()) >= table.shape[0]):
        raise ValueError(f"embedding index out of range for table of {table.shape[0]} rows")
    return table[indices]


def mean(x: torch.Tensor, axis=None) -> torch.Tensor:
    return x.mean() if axis is None else x.mean(dim=axis)


def sum(x: torch.Tensor, axis=None) -> torch.Tensor:  # noqa: A001
    return x.sum() if axis is None else x.sum(dim=axis)


def dropout(x: torch.Tensor, rate: float, generator: Optional[torch.Generator], training: bool) -> torch.Tensor:
    """Inverted dropout drawing from an explicit generator, so runs are replayable."""
    if not training or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator) >= rate
    return x * keep.to(x.dtype) / (1.0 - rate)


def grad(loss: torch.Tensor, leaves: Sequence[torch.Tensor], retain_graph: bool = False,
         create_graph: bool = False) -> list[torch.Tensor]:
    """Gradients of a scalar `loss` w.r.t. each leaf; zeros for leaves off the path."""
    if loss.numel() != 1:
        raise ValueError(f"grad needs a scalar loss, got shape {tuple(loss.shape)}")
    grads = torch.autograd.grad(loss.reshape(()), list(leaves), retain_graph=retain_graph,
                                create_graph=create_graph, allow_unused=True)
    return [torch.zeros_like(leaf) if g is None else g for g, leaf in zip(grads, leaves)]
