"""Conversation expert: a Cloze-trained bidirectional transformer over the
sequence of entities mentioned in the dialog."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .base import ExpertEstimator, check_contexts, pad_batch
from .nn_core import ConfigError, TransformerBlock, cross_entropy_loss, key_padding_mask

PAD_TOKEN, MASK_TOKEN = 0, 1
TOKEN_OFFSET = 2


def mask_cloze(sequence, p: float, rng: np.random.Generator, mask_token: int = MASK_TOKEN):
    """Replace each position by ``mask_token`` with probability ``p``.

    Draws are repeated until at least one position is masked.  Returns the
    masked sequence, the masked positions and the original ids there.
    """
    seq = np.asarray(sequence, dtype=np.int64)
    if seq.size == 0:
        raise ValueError("cannot mask an empty sequence")
    while True:
        hit = rng.random(seq.size) < p
        if hit.any():
            break
    masked = seq.copy()
    masked[hit] = mask_token
    positions = np.flatnonzero(hit)
    return masked, positions, seq[positions]


class ConvEncoder(nn.Module):
    def __init__(self, n_entities, n_items, dim, n_layers, heads, max_len, dropout, order):
        super().__init__()
        self.max_len = max_len
        self.entity_emb = nn.Embedding(n_entities + TOKEN_OFFSET, dim)
        self.pos_emb = nn.Embedding(max_len, dim)
        nn.init.normal_(self.entity_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb.weight, std=0.02)
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads, dropout, order) for _ in range(n_layers))
        self.head = nn.Linear(dim, n_items)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        """h_k = s_k + p_k for a (batch, length) token tensor."""
        if tokens.shape[1] > self.max_len:
            raise ValueError(f"sequence length {tokens.shape[1]} exceeds maximum {self.max_len}")
        positions = torch.arange(tokens.shape[1])
        return self.entity_emb(tokens) + self.pos_emb(positions)[None]

    def encode(self, H: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        mask = key_padding_mask(lengths, H.shape[1])
        for block in self.blocks:
            H = block(H, mask)
        return H

    def forward(self, tokens, lengths):
        return self.encode(self.embed(tokens), lengths)

    def predict_items(self, h: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.head(h), dim=-1)


class ConvExpert(ExpertEstimator):
    """Masked-entity transformer recommender.

    Training sequences are each context followed by its target item.  At
    inference a mask token is appended to the context and its final-layer
    state gives both the hidden vector and the item distribution.

    Parameters
    ----------
    hidden_dim, n_layers, n_heads : int
        Transformer width, depth and heads.
    max_len : int
        Maximum sequence length; longer contexts keep their most recent
        entities.
    mask_prob : float
        Cloze masking probability.
    order : {"ffn_first", "attn_first"}
        Sublayer order inside each block.  ``"ffn_first"`` runs the feed-forward
        sublayer before self-attention.
    """

    def __init__(
        self,
        hidden_dim=32,
        n_layers=2,
        n_heads=2,
        max_len=50,
        mask_prob=0.4,
        dropout=0.1,
        order="ffn_first",
        learning_rate=1e-4,
        batch_size=256,
        n_epochs=20,
        weight_decay=0.01,
        clip_norm=5.0,
        random_state=0,
    ):
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.max_len = max_len
        self.mask_prob = mask_prob
        self.dropout = dropout
        self.order = order
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_epochs = n_epochs
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.random_state = random_state

    def _build(self, corpus):
        if not 0.0 < self.mask_prob < 1.0:
            raise ConfigError(f"mask_prob must be in (0, 1), got {self.mask_prob}")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")
        self.module_ = ConvEncoder(
            corpus.n_entities,
            len(self.items_),
            self.hidden_dim,
            self.n_layers,
            self.n_heads,
            self.max_len,
            self.dropout,
            self.order,
        )
        entity_to_col = np.full(corpus.n_entities + TOKEN_OFFSET, -1, dtype=np.int64)
        for col, item in enumerate(self.items_):
            entity_to_col[item + TOKEN_OFFSET] = col
        self.token_to_col_ = entity_to_col

    def _tokens(self, entities) -> list[int]:
        return [e + TOKEN_OFFSET for e in entities]

    def _batch_loss(self, contexts, cols, rng):
        seqs, targets = [], []
        for ctx, col in zip(contexts, cols):
            full = self._tokens(ctx) + [int(self.items_[col]) + TOKEN_OFFSET]
            full = full[-self.max_len :]
            masked, pos, orig = mask_cloze(full, self.mask_prob, rng)
            seqs.append(masked)
            targets.append((pos, orig))
        tokens, lengths = pad_batch(seqs, PAD_TOKEN)
        H = self.module_(tokens, lengths)
        rows, positions, labels = [], [], []
        for b, (pos, orig) in enumerate(targets):
            lab = self.token_to_col_[orig]
            keep = lab >= 0
            rows.extend([b] * int(keep.sum()))
            positions.extend(pos[keep].tolist())
            labels.extend(lab[keep].tolist())
        if not labels:
            return None
        h = H[torch.tensor(rows), torch.tensor(positions)]
        return cross_entropy_loss(self.module_.predict_items(h), labels, reduction="sum"), len(labels)

    def _inference_batch(self, contexts):
        seqs = [(self._tokens(ctx)[-(self.max_len - 1) :] if self.max_len > 1 else []) + [MASK_TOKEN] for ctx in contexts]
        tokens, lengths = pad_batch(seqs, PAD_TOKEN)
        return self.module_(tokens, lengths), lengths

    def _outputs(self, contexts):
        H, lengths = self._inference_batch(contexts)
        h = H[torch.arange(len(contexts)), lengths - 1]
        return h, self.module_.predict_items(h)

    @torch.no_grad()
    def context_states(self, X) -> list[np.ndarray]:
        """Final-layer states over each context's entity positions."""
        self._check()
        self.module_.eval()
        contexts = check_contexts(X)
        H, lengths = self._inference_batch(contexts)
        return [H[i, : int(lengths[i]) - 1].numpy() for i in range(len(contexts))]
