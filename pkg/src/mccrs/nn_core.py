"""Differentiable building blocks shared by the experts and the decoder.

Autodiff is delegated to torch; everything runs in float64.  The optimizer
(Adam with global-norm clipping and coupled L2 decay) and the
finite-difference gradient checker are implemented here directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DTYPE = torch.float64
LAYER_NORM_EPS = 1e-5

torch.set_default_dtype(DTYPE)

ParameterSet = Mapping[str, torch.Tensor]


class ConfigError(ValueError):
    """Raised for inconsistent model configuration."""


class NumericError(ArithmeticError):
    """Raised when a loss or gradient is not finite."""


def affine(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Return ``W @ x + b`` applied over the last axis of ``x``."""
    if W.dim() != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ValueError(
            f"dimension mismatch: x{tuple(x.shape)}, W{tuple(W.shape)}, b{tuple(b.shape)}"
        )
    return x @ W.T + b


def gelu(x: torch.Tensor) -> torch.Tensor:
    # exact Gaussian-CDF form
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def scaled_dot_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor | None = None
) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes.

    ``mask`` is boolean, True where attention is allowed, and broadcasts
    against the (..., Lq, Lk) score tensor.
    """
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if mask is not None:
        if not bool(mask.any(dim=-1).all()):
            raise ValueError("attention mask has a fully masked query row")
        scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


class MultiHeadAttention(nn.Module):
    """Multi-head attention with separate query/key/value sources."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if heads < 1 or dim % heads:
            raise ConfigError(f"model dimension {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, L, _ = x.shape
        return x.view(B, L, self.heads, self.dim // self.heads).transpose(1, 2)

    def forward(self, query_src, key_src, value_src, mask=None):
        """Inputs are (batch, length, dim); ``mask`` is (Lq, Lk) or (batch, Lq, Lk)."""
        q = self._split(self.q_proj(query_src))
        k = self._split(self.k_proj(key_src))
        v = self._split(self.v_proj(value_src))
        if mask is not None and mask.dim() == 3:
            mask = mask.unsqueeze(1)
        out = scaled_dot_attention(q, k, v, mask)
        B, _, Lq, _ = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(B, Lq, self.dim))


def multi_head_attention(query_src, key_src, value_src, heads, mask=None, module=None):
    """Functional entry point; builds identity projections when no module is given."""
    if module is None:
        dim = query_src.shape[-1]
        module = MultiHeadAttention(dim, heads)
        with torch.no_grad():
            for lin in (module.q_proj, module.k_proj, module.v_proj, module.out_proj):
                lin.weight.copy_(torch.eye(dim))
                lin.bias.zero_()
    elif module.heads != heads:
        raise ConfigError(f"module has {module.heads} heads, asked for {heads}")
    return module(query_src, key_src, value_src, mask)


class PFFN(nn.Module):
    """Position-wise feed-forward network: affine, GELU, affine."""

    def __init__(self, dim: int, inner_dim: int | None = None):
        super().__init__()
        inner_dim = inner_dim or 4 * dim
        self.inner = nn.Linear(dim, inner_dim)
        self.outer = nn.Linear(inner_dim, dim)

    def forward(self, x):
        return self.outer(gelu(self.inner(x)))


def pffn(x: torch.Tensor, module: PFFN) -> torch.Tensor:
    return module(x)


class ResidualNorm(nn.Module):
    """LayerNorm(x + Dropout(sublayer_out))."""

    def __init__(self, dim: int, dropout: float = 0.1):
        super().__init__()
        if not 0.0 <= dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {dropout}")
        self.norm = nn.LayerNorm(dim, eps=LAYER_NORM_EPS)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, sublayer_out):
        if x.shape != sublayer_out.shape:
            raise ValueError(
                f"shape mismatch: x{tuple(x.shape)} vs sublayer{tuple(sublayer_out.shape)}"
            )
        return self.norm(x + self.dropout(sublayer_out))


def residual_norm(x, sublayer_out, dropout_p: float = 0.0, training: bool = False):
    """Unparameterised residual + layer norm (no affine gain/bias)."""
    if x.shape != sublayer_out.shape:
        raise ValueError(f"shape mismatch: x{tuple(x.shape)} vs sublayer{tuple(sublayer_out.shape)}")
    y = x + F.dropout(sublayer_out, dropout_p, training)
    return F.layer_norm(y, y.shape[-1:], eps=LAYER_NORM_EPS)


class TransformerBlock(nn.Module):
    """Self-attention block with two residual-norm sublayers.

    ``order="ffn_first"`` applies the feed-forward sublayer before attention;
    ``order="attn_first"`` applies attention first.
    """

    def __init__(self, dim: int, heads: int, dropout: float = 0.1, order: str = "attn_first"):
        super().__init__()
        if order not in ("ffn_first", "attn_first"):
            raise ConfigError(f"unknown sublayer order {order!r}")
        self.order = order
        self.attn = MultiHeadAttention(dim, heads)
        self.ffn = PFFN(dim)
        self.attn_norm = ResidualNorm(dim, dropout)
        self.ffn_norm = ResidualNorm(dim, dropout)

    def _attend(self, x, mask):
        return self.attn_norm(x, self.attn(x, x, x, mask))

    def _feed(self, x):
        return self.ffn_norm(x, self.ffn(x))

    def forward(self, x, mask=None):
        if self.order == "ffn_first":
            return self._attend(self._feed(x), mask)
        return self._feed(self._attend(x, mask))


def key_padding_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    """(batch, 1, max_len) boolean mask, True on real positions."""
    return (torch.arange(max_len)[None, :] < lengths[:, None]).unsqueeze(1)


class AttentionPool(nn.Module):
    """Additive self-attention pooling: softmax(w^T tanh(W_a x)) weighted sum.

    Rows with no valid entries pool to the zero vector.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(dim, dim)
        self.score = nn.Linear(dim, 1, bias=False)

    def weights(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        s = self.score(torch.tanh(self.proj(x))).squeeze(-1)
        s = s.masked_fill(~valid, float("-inf"))
        empty = ~valid.any(dim=-1, keepdim=True)
        s = s.masked_fill(empty, 0.0)
        return torch.softmax(s, dim=-1).masked_fill(empty, 0.0)

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        """x is (batch, n, dim), valid is (batch, n) boolean."""
        return (self.weights(x, valid).unsqueeze(-1) * x).sum(dim=1)


def cross_entropy_loss(P: torch.Tensor, labels, check: bool = True, reduction: str = "mean") -> torch.Tensor:
    """Mean (or sum) over rows of -log P[row, label]."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if P.dim() != 2 or labels.shape != (P.shape[0],):
        raise ValueError(f"expected P (n, V) and labels (n,), got {tuple(P.shape)}, {tuple(labels.shape)}")
    if len(labels) and (labels.min() < 0 or labels.max() >= P.shape[1]):
        raise IndexError(f"label out of range [0, {P.shape[1]})")
    if check:
        sums = P.detach().sum(dim=1)
        if not torch.allclose(sums, torch.ones_like(sums), atol=1e-6, rtol=0.0):
            raise ValueError("probability rows must sum to 1")
    nll = -torch.log(P.gather(1, labels[:, None]).squeeze(1))
    if reduction == "sum":
        return nll.sum()
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    return nll.mean()


@dataclass
class OptimizerState:
    lr: float = 1e-4
    clip_norm: float | None = 5.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


def _named(params) -> dict[str, torch.Tensor]:
    if isinstance(params, Mapping):
        return dict(params)
    if isinstance(params, nn.Module):
        return dict(params.named_parameters())
    return {str(i): p for i, p in enumerate(params)}


def clip_grad_global_norm(grads: Iterable[torch.Tensor], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``."""
    grads = list(grads)
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g.mul_(scale)
    return total


@torch.no_grad()
def adam_step(params, state: OptimizerState):
    """One Adam update: clip global norm, add L2 decay, bias-corrected step."""
    named = {k: p for k, p in _named(params).items() if p.grad is not None}
    grads = {k: p.grad.clone() for k, p in named.items()}
    if state.clip_norm is not None:
        clip_grad_global_norm(grads.values(), state.clip_norm)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in named.items():
        g = grads[name]
        if state.weight_decay:
            g = g + state.weight_decay * p
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        v = state.exp_avg_sq[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(state.lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return params


def grad_check(
    loss_fn: Callable[[ParameterSet], torch.Tensor],
    params,
    epsilon: float = 1e-5,
    floor: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Worst relative error between autograd and central finite differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps coordinates whose true gradient is ~0 from dividing noise by
    noise.  ``max_coords`` samples that many coordinates per tensor.
    """
    named = _named(params)
    for p in named.values():
        p.grad = None
    loss = loss_fn(named)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {float(loss.detach())}")
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for name, p in named.items():
            analytic = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_coords is not None and len(idx) > max_coords:
                idx = rng.choice(idx, size=max_coords, replace=False)
            for i in idx:
                orig = float(flat[i])
                flat[i] = orig + epsilon
                fp = float(loss_fn(named))
                flat[i] = orig - epsilon
                fm = float(loss_fn(named))
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
                numeric = (fp - fm) / (2.0 * epsilon)
                a = float(analytic.view(-1)[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    for p in named.values():
        p.grad = None
    return worst
