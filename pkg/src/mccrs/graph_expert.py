"""Graph expert: R-GCN entity encoder, attentive user pooling and
dot-product item scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .base import ExpertEstimator, check_contexts, pad_batch
from .corpus import Triple
from .nn_core import AttentionPool, ConfigError, cross_entropy_loss


@dataclass(frozen=True)
class KnowledgeGraph:
    """Directed multigraph stored as edge arrays.

    Edge ``k`` sends a message from ``src[k]`` to ``dst[k]`` under relation
    ``rel[k]``.  With ``inverse=True`` every triple also yields a reverse edge
    under relation ``r + n_relations``.
    """

    n_entities: int
    n_relations: int
    src: np.ndarray
    dst: np.ndarray
    rel: np.ndarray

    @classmethod
    def from_triples(cls, triples, n_entities: int, n_relations: int, inverse: bool = True) -> "KnowledgeGraph":
        src, dst, rel = [], [], []
        for t in triples:
            t = t if isinstance(t, Triple) else Triple(*t)
            if not (0 <= t.head < n_entities and 0 <= t.tail < n_entities and 0 <= t.relation < n_relations):
                raise ValueError(f"triple {t} references ids outside the graph")
            src.append(t.head)
            dst.append(t.tail)
            rel.append(t.relation)
            if inverse:
                src.append(t.tail)
                dst.append(t.head)
                rel.append(t.relation + n_relations)
        n_rel = 2 * n_relations if inverse else n_relations
        as_arr = lambda v: np.asarray(v, dtype=np.int64)
        return cls(n_entities, n_rel, as_arr(src), as_arr(dst), as_arr(rel))

    def neighbors(self, e: int, r: int) -> list[int]:
        """Inbound neighbours of ``e`` under relation ``r``."""
        sel = (self.dst == e) & (self.rel == r)
        return self.src[sel].tolist()


def rgcn_layer(N, graph: KnowledgeGraph, W_rel, W_self, norm: float = 1.0):
    """ReLU(sum_r sum_{e' in N_e^r} W_r n_e' / Z + W n_e) for every node.

    ``N`` is (n_entities, d_in); ``W_rel`` is (n_rel, d_out, d_in), ``W_self``
    (d_out, d_in).
    """
    out = N @ W_self.T
    if len(graph.src):
        src = torch.from_numpy(graph.src)
        dst = torch.from_numpy(graph.dst)
        rel = torch.from_numpy(graph.rel)
        msg = torch.einsum("eoi,ei->eo", W_rel[rel], N[src]) / norm
        out = out.index_add(0, dst, msg)
    return torch.relu(out)


class RGCNEncoder(nn.Module):
    def __init__(self, n_entities, n_relations, dim, n_layers, init_std, initial=None):
        super().__init__()
        self.node_emb = nn.Parameter(torch.randn(n_entities, dim) * init_std)
        if initial is not None:
            with torch.no_grad():
                self.node_emb.copy_(torch.as_tensor(initial))
        self.W_rel = nn.ParameterList()
        self.W_self = nn.ParameterList()
        for _ in range(n_layers):
            w_rel = torch.empty(n_relations, dim, dim)
            for r in range(n_relations):
                nn.init.xavier_uniform_(w_rel[r])
            self.W_rel.append(nn.Parameter(w_rel))
            w_self = torch.empty(dim, dim)
            nn.init.xavier_uniform_(w_self)
            self.W_self.append(nn.Parameter(w_self))
        self.pool = AttentionPool(dim)

    def nodes(self, graph, norm):
        N = self.node_emb
        for W_rel, W_self in zip(self.W_rel, self.W_self):
            N = rgcn_layer(N, graph, W_rel, W_self, norm)
        return N


class GraphExpert(ExpertEstimator):
    """R-GCN recommender over the knowledge graph.

    Node embeddings, relation weights and the pooling attention are trained
    end to end on the recommendation loss.  ``initial_embeddings`` replaces
    the seeded Gaussian initial node table, e.g. with embeddings produced by
    a separate pretraining routine.
    """

    def __init__(
        self,
        hidden_dim=32,
        n_layers=1,
        norm_const=1.0,
        inverse_edges=True,
        init_std=0.02,
        initial_embeddings=None,
        learning_rate=1e-4,
        batch_size=256,
        n_epochs=20,
        weight_decay=0.01,
        clip_norm=5.0,
        random_state=0,
    ):
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers
        self.norm_const = norm_const
        self.inverse_edges = inverse_edges
        self.init_std = init_std
        self.initial_embeddings = initial_embeddings
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_epochs = n_epochs
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.random_state = random_state

    def _build(self, corpus):
        if self.n_layers < 1:
            raise ConfigError("R-GCN needs at least one layer")
        if self.norm_const <= 0:
            raise ConfigError("normalisation constant must be positive")
        self.graph_ = KnowledgeGraph.from_triples(
            corpus.triples, corpus.n_entities, corpus.n_relations, inverse=self.inverse_edges
        )
        self.module_ = RGCNEncoder(
            corpus.n_entities,
            self.graph_.n_relations,
            self.hidden_dim,
            self.n_layers,
            self.init_std,
            self.initial_embeddings,
        )
        self.items_t_ = torch.from_numpy(self.items_)

    def node_embeddings(self, training: bool = False) -> torch.Tensor:
        N = self.module_.nodes(self.graph_, self.norm_const)
        return N if training else N.detach()

    def _user(self, N, contexts):
        ids, lengths = pad_batch(contexts, 0)
        valid = torch.arange(ids.shape[1])[None, :] < lengths[:, None]
        return self.module_.pool(N[ids], valid)

    def _scores(self, N, contexts):
        n_u = self._user(N, contexts)
        return n_u, torch.softmax(n_u @ N[self.items_t_].T, dim=-1)

    def _batch_loss(self, contexts, cols, rng):
        N = self.module_.nodes(self.graph_, self.norm_const)
        _, P = self._scores(N, contexts)
        return cross_entropy_loss(P, cols, reduction="sum"), len(cols)

    def _outputs(self, contexts):
        N = self.module_.nodes(self.graph_, self.norm_const)
        return self._scores(N, contexts)

    @torch.no_grad()
    def context_nodes(self, X) -> list[np.ndarray]:
        """R-GCN rows of each context's mentioned entities."""
        self._check()
        N = self.node_embeddings().numpy()
        return [N[list(ctx)] if ctx else np.zeros((0, self.hidden_dim)) for ctx in check_contexts(X)]
