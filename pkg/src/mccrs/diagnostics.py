"""Finite-difference gradient checks over every trainable component."""

from __future__ import annotations

import numpy as np
import torch

from .chairbot import Gate, fuse_inputs, recommend
from .conv_expert import ConvExpert
from .corpus import SyntheticSpec, generate_synthetic
from .generator import DecoderLayer, causal_mask
from .graph_expert import GraphExpert
from .nn_core import DTYPE, cross_entropy_loss, grad_check
from .review_expert import ReviewExpert

TOY_SPEC = SyntheticSpec(
    n_items=12,
    n_clusters=3,
    n_attributes=6,
    n_conversations=12,
    n_generic_words=10,
    cluster_words=2,
    min_turns=3,
    max_turns=4,
    max_sentences=3,
)
COMPONENTS = ("conv", "graph", "review", "gate", "decoder_layer")


def _randomize(module: torch.nn.Module, seed: int, std: float = 0.3) -> None:
    # zero-initialised heads would make most gradients exactly zero
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(std * torch.randn(p.shape, generator=g, dtype=p.dtype))


def _expert_loss(est, contexts, cols, seed):
    def loss_fn(_params):
        loss, n = est._batch_loss(contexts, cols, np.random.default_rng(seed))
        return loss / n

    return loss_fn


def _toy(seed: int):
    corpus = generate_synthetic(TOY_SPEC, seed=seed)
    X = corpus.examples()[:6]
    return corpus, X


def check_expert(name: str, seed: int = 0, max_coords: int | None = 12, dim: int = 4) -> float:
    corpus, X = _toy(seed)
    cls = {"conv": ConvExpert, "graph": GraphExpert, "review": ReviewExpert}[name]
    kwargs = {"hidden_dim": dim, "random_state": seed}
    if name != "graph":
        kwargs["dropout"] = 0.0
    est = cls(**kwargs).pre_fit(corpus)
    _randomize(est.module_, seed)
    est.module_.eval()
    contexts = [x.context_entities for x in X]
    cols = np.array([est.item_index_[x.target_item] for x in X])
    return grad_check(_expert_loss(est, contexts, cols, seed), est.module_, max_coords=max_coords, seed=seed)


def check_gate(seed: int = 0, n_experts: int = 3, batch: int = 5, n_items: int = 7, dim: int = 4) -> float:
    g = torch.Generator().manual_seed(seed)
    hs = [torch.randn(batch, dim, generator=g, dtype=DTYPE) for _ in range(n_experts)]
    ps = [torch.softmax(torch.randn(batch, n_items, generator=g, dtype=DTYPE), -1) for _ in range(n_experts)]
    fused = [fuse_inputs(h, p) for h, p in zip(hs, ps)]
    labels = torch.randint(0, n_items, (batch,), generator=g)
    gate = Gate([dim + n_items] * n_experts).to(DTYPE)
    _randomize(gate, seed)

    def loss_fn(_params):
        return cross_entropy_loss(recommend(gate(fused), ps), labels, check=False)

    return grad_check(loss_fn, gate, seed=seed)


def check_decoder_layer(seed: int = 0, dim: int = 4, heads: int = 2, length: int = 4, max_coords: int | None = 12) -> float:
    g = torch.Generator().manual_seed(seed)
    layer = DecoderLayer(dim, heads, dropout=0.0).to(DTYPE)
    _randomize(layer, seed)
    layer.eval()
    B = torch.randn(2, length, dim, generator=g, dtype=DTYPE)
    memories = []
    for m_len in (3, 2, 5, 4):
        M = torch.randn(2, m_len, dim, generator=g, dtype=DTYPE)
        memories.append((M, torch.ones(2, 1, m_len, dtype=torch.bool)))
    weights = torch.randn(2, length, dim, generator=g, dtype=DTYPE)
    mask = causal_mask(length)

    def loss_fn(_params):
        return (layer(B, mask, memories) * weights).mean()

    return grad_check(loss_fn, layer, max_coords=max_coords, seed=seed)


def gradient_suite(seed: int = 0, max_coords: int | None = None) -> dict[str, float]:
    """Worst relative gradient error per component."""
    return {
        "conv": check_expert("conv", seed, max_coords),
        "graph": check_expert("graph", seed, max_coords),
        "review": check_expert("review", seed, max_coords),
        "gate": check_gate(seed),
        "decoder_layer": check_decoder_layer(seed, max_coords=max_coords),
    }
