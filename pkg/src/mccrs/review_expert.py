"""Review expert: sentence transformer, sentence-level attention pooling into
one vector per item, mean imputation for items without reviews."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .base import ExpertEstimator, check_contexts, pad_batch
from .corpus import PAD
from .nn_core import AttentionPool, ConfigError, TransformerBlock, cross_entropy_loss, key_padding_mask


def impute_missing(present: torch.Tensor, present_rows, n_items: int) -> torch.Tensor:
    """Scatter ``present`` review vectors into an (n_items, d) table and fill
    the remaining rows with the mean of the present ones."""
    if present.shape[0] == 0:
        raise ValueError("no item has reviews; cannot impute missing ones")
    rows = torch.as_tensor(present_rows, dtype=torch.long)
    mean = present.mean(dim=0, keepdim=True)
    table = mean.expand(n_items, -1).clone()
    return table.index_copy(0, rows, present)


class ReviewEncoder(nn.Module):
    def __init__(self, n_words, dim, n_layers, heads, max_tokens, dropout):
        super().__init__()
        self.word_emb = nn.Embedding(n_words, dim)
        self.pos_emb = nn.Embedding(max_tokens, dim)
        nn.init.normal_(self.word_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb.weight, std=0.02)
        self.token_blocks = nn.ModuleList(TransformerBlock(dim, heads, dropout) for _ in range(n_layers))
        self.sentence_block = TransformerBlock(dim, heads, dropout)
        self.review_pool = AttentionPool(dim)
        self.user_pool = AttentionPool(dim)

    def encode_sentences(self, tokens: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """(n_sentences, T) word ids -> (n_sentences, d), mean over real tokens."""
        if (lengths < 1).any():
            raise ValueError("empty review sentence")
        H = self.word_emb(tokens) + self.pos_emb(torch.arange(tokens.shape[1]))[None]
        mask = key_padding_mask(lengths, tokens.shape[1])
        for block in self.token_blocks:
            H = block(H, mask)
        valid = (torch.arange(tokens.shape[1])[None, :] < lengths[:, None]).unsqueeze(-1)
        return (H * valid).sum(dim=1) / lengths[:, None]

    def encode_reviews(self, D: torch.Tensor, n_sentences: torch.Tensor) -> torch.Tensor:
        """(n_docs, m, d) sentence matrices -> (n_docs, d) review vectors.

        No positions on the sentence axis: a review is a set of sentences.
        """
        mask = key_padding_mask(n_sentences, D.shape[1])
        ctx = self.sentence_block(D, mask)
        valid = torch.arange(D.shape[1])[None, :] < n_sentences[:, None]
        return self.review_pool(ctx, valid)


class ReviewExpert(ExpertEstimator):
    """Review-based recommender.

    Item vectors come from encoding each item's review sentences and pooling
    them; the user vector pools the vectors of the items mentioned in the
    context.  Items without reviews receive the mean of the others.
    """

    def __init__(
        self,
        hidden_dim=32,
        n_layers=2,
        n_heads=2,
        max_tokens=32,
        max_sentences=16,
        dropout=0.1,
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
        self.max_tokens = max_tokens
        self.max_sentences = max_sentences
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_epochs = n_epochs
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.random_state = random_state

    def _build(self, corpus):
        if not corpus.reviews:
            raise ConfigError("review expert needs at least one item with reviews")
        self.module_ = ReviewEncoder(
            corpus.n_words, self.hidden_dim, self.n_layers, self.n_heads, self.max_tokens, self.dropout
        )
        sentences, owner, doc_rows = [], [], []
        self.item_sentences_ = {}
        for doc in sorted(corpus.reviews, key=lambda r: r.item):
            if doc.item not in self.item_index_:
                continue
            k = len(doc_rows)
            doc_rows.append(self.item_index_[doc.item])
            start = len(sentences)
            for s in doc.sentences[: self.max_sentences]:
                sentences.append(list(s[: self.max_tokens]))
                owner.append(k)
            self.item_sentences_[doc.item] = (start, len(sentences))
        self.sent_tokens_, self.sent_lengths_ = pad_batch(sentences, PAD)
        owner = np.asarray(owner)
        counts = np.bincount(owner, minlength=len(doc_rows))
        self.doc_counts_ = torch.from_numpy(counts)
        # slot of each sentence in the padded (n_docs, m, d) review tensor
        slot = np.zeros(len(owner), dtype=np.int64)
        for k in range(len(doc_rows)):
            slot[owner == k] = np.arange(counts[k])
        self.sent_owner_ = torch.from_numpy(owner)
        self.sent_slot_ = torch.from_numpy(slot)
        self.doc_rows_ = np.asarray(doc_rows, dtype=np.int64)
        self.missing_items_ = np.setdiff1d(self.items_, self.items_[self.doc_rows_])
        self.col_of_entity_ = np.full(corpus.n_entities, -1, dtype=np.int64)
        self.col_of_entity_[self.items_] = np.arange(len(self.items_))

    def sentence_vectors(self) -> torch.Tensor:
        return self.module_.encode_sentences(self.sent_tokens_, self.sent_lengths_)

    def item_vectors(self) -> torch.Tensor:
        """(n_items, d) review embeddings, imputed where reviews are missing."""
        S = self.sentence_vectors()
        D = torch.zeros(len(self.doc_rows_), int(self.doc_counts_.max()), S.shape[1])
        D = D.index_put((self.sent_owner_, self.sent_slot_), S)
        V = self.module_.encode_reviews(D, self.doc_counts_)
        return impute_missing(V, self.doc_rows_, len(self.items_))

    def _user(self, V, contexts):
        cols = [[int(c) for c in self.col_of_entity_[list(ctx)] if c >= 0] if ctx else [] for ctx in contexts]
        ids, lengths = pad_batch(cols, 0)
        valid = torch.arange(ids.shape[1])[None, :] < lengths[:, None]
        return self.module_.user_pool(V[ids], valid)

    def _scores(self, V, contexts):
        u = self._user(V, contexts)
        return u, torch.softmax(u @ V.T, dim=-1)

    def _batch_loss(self, contexts, cols, rng):
        _, P = self._scores(self.item_vectors(), contexts)
        return cross_entropy_loss(P, cols, reduction="sum"), len(cols)

    def _outputs(self, contexts):
        return self._scores(self.item_vectors(), contexts)

    @torch.no_grad()
    def context_sentences(self, X) -> list[np.ndarray]:
        """Review sentence vectors of the items mentioned in each context."""
        self._check()
        self.module_.eval()
        S = self.sentence_vectors().numpy()
        out = []
        for ctx in check_contexts(X):
            spans = [self.item_sentences_[e] for e in ctx if e in self.item_sentences_]
            rows = [S[a:b] for a, b in spans]
            out.append(np.concatenate(rows) if rows else np.zeros((0, self.hidden_dim)))
        return out
