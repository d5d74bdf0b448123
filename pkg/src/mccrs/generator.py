"""Response generation: dialog encoder and a decoder whose layers attend in
turn to the conversation, graph and review expert representations and to the
encoded dialog history."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .base import check_contexts, pad_batch
from .corpus import EOS, PAD, RecExample
from .nn_core import (
    DTYPE,
    PFFN,
    MultiHeadAttention,
    NumericError,
    OptimizerState,
    ResidualNorm,
    TransformerBlock,
    adam_step,
    key_padding_mask,
)

START = EOS  # the end marker doubles as the start-of-sequence token
SOURCE_NAMES = ("conv", "graph", "review")


@dataclass
class FusionSources:
    """Per-example representation matrices fed to the decoder.

    ``conv``, ``graph`` and ``review`` hold one (n_i, d_src) array per
    example; empty arrays are replaced by a learned null vector.
    """

    conv: list
    graph: list
    review: list

    def __len__(self):
        return len(self.conv)

    def subset(self, idx) -> "FusionSources":
        return FusionSources(*[[getattr(self, n)[i] for i in idx] for n in SOURCE_NAMES])


def causal_mask(length: int) -> torch.Tensor:
    return torch.tril(torch.ones(length, length, dtype=torch.bool))


class DecoderLayer(nn.Module):
    """Self-attention, then cross-attention to conv, graph, review and dialog
    states, then a feed-forward sublayer; each wrapped in residual + norm."""

    def __init__(self, dim, heads, dropout):
        super().__init__()
        self.attn = nn.ModuleList(MultiHeadAttention(dim, heads) for _ in range(5))
        self.norms = nn.ModuleList(ResidualNorm(dim, dropout) for _ in range(6))
        self.ffn = PFFN(dim)

    def forward(self, B, self_mask, memories):
        """``memories`` is a list of four (tensor, mask) pairs: conv, graph,
        review, dialog; masks are (batch, 1, L_src)."""
        A = self.norms[0](B, self.attn[0](B, B, B, self_mask))
        for k, (M, mask) in enumerate(memories, start=1):
            A = self.norms[k](A, self.attn[k](A, M, M, mask))
        return self.norms[5](A, self.ffn(A))


class GeneratorModule(nn.Module):
    def __init__(self, n_words, dim, n_layers, heads, max_context, max_response, source_dims, dropout):
        super().__init__()
        self.word_emb = nn.Embedding(n_words, dim)
        nn.init.normal_(self.word_emb.weight, std=0.02)
        self.enc_pos = nn.Embedding(max_context, dim)
        self.dec_pos = nn.Embedding(max_response, dim)
        nn.init.normal_(self.enc_pos.weight, std=0.02)
        nn.init.normal_(self.dec_pos.weight, std=0.02)
        self.encoder = nn.ModuleList(TransformerBlock(dim, heads, dropout) for _ in range(n_layers))
        self.source_proj = nn.ModuleList(nn.Linear(d, dim) for d in source_dims)
        self.null = nn.Parameter(torch.randn(len(source_dims), dim) * 0.02)
        self.decoder = nn.ModuleList(DecoderLayer(dim, heads, dropout) for _ in range(n_layers))
        self.head = nn.Linear(dim, n_words)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def encode_dialog(self, words: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        H = self.word_emb(words) + self.enc_pos(torch.arange(words.shape[1]))[None]
        mask = key_padding_mask(lengths, words.shape[1])
        for block in self.encoder:
            H = block(H, mask)
        return H

    def memory(self, k: int, padded: torch.Tensor, lengths: torch.Tensor):
        """Project source ``k``; examples with no rows get the null vector."""
        M = self.source_proj[k](padded)
        empty = lengths == 0
        if bool(empty.any()):
            M = M.clone()
            M[empty, 0] = self.null[k]
        L = torch.clamp(lengths, min=1)
        return M, key_padding_mask(L, M.shape[1])

    def decode(self, tokens, memories):
        B = self.word_emb(tokens) + self.dec_pos(torch.arange(tokens.shape[1]))[None]
        mask = causal_mask(tokens.shape[1])
        for layer in self.decoder:
            B = layer(B, mask, memories)
        return self.head(B)


def _pad_sources(arrays, dim):
    lengths = torch.tensor([len(a) for a in arrays], dtype=torch.long)
    L = max(1, int(lengths.max()) if len(arrays) else 1)
    out = torch.zeros(len(arrays), L, dim)
    for i, a in enumerate(arrays):
        if len(a):
            out[i, : len(a)] = torch.as_tensor(np.asarray(a))
    return out, lengths


class ResponseGenerator(BaseEstimator):
    """Transformer response generator conditioned on the three experts.

    ``fit(X, corpus=...)`` takes RecExamples; the gold response is the
    recommender utterance at the example's turn.  ``bias_strength > 0`` adds
    that much to the logits of the name tokens of the top recommended item
    during generation (requires ``recommender``).
    """

    def __init__(
        self,
        conv_expert,
        graph_expert,
        review_expert,
        recommender=None,
        hidden_dim=32,
        n_layers=2,
        n_heads=2,
        max_context=128,
        max_response=20,
        dropout=0.1,
        bias_strength=0.0,
        learning_rate=1e-4,
        batch_size=256,
        n_epochs=20,
        weight_decay=0.01,
        clip_norm=5.0,
        random_state=0,
    ):
        self.conv_expert = conv_expert
        self.graph_expert = graph_expert
        self.review_expert = review_expert
        self.recommender = recommender
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.max_context = max_context
        self.max_response = max_response
        self.dropout = dropout
        self.bias_strength = bias_strength
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_epochs = n_epochs
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.random_state = random_state

    @property
    def _experts(self):
        return (self.conv_expert, self.graph_expert, self.review_expert)

    def build(self, corpus):
        if self.max_response < 1:
            raise ValueError("max_response must be >= 1")
        for name, est in zip(SOURCE_NAMES, self._experts):
            try:
                check_is_fitted(est, "module_")
            except Exception as e:
                raise ValueError(f"{name} expert is not trained") from e
        self.n_words_ = corpus.n_words
        word_index = {w: i for i, w in enumerate(corpus.words)}
        self.item_name_tokens_ = {
            e.id: [word_index[w] for w in e.name.split() if w in word_index] for e in corpus.entities if e.is_item
        }
        self.source_dims_ = [est.hidden_dim for est in self._experts]
        with torch.random.fork_rng():
            torch.manual_seed(self.random_state)
            self.module_ = GeneratorModule(
                corpus.n_words,
                self.hidden_dim,
                self.n_layers,
                self.n_heads,
                self.max_context,
                self.max_response + 1,
                self.source_dims_,
                self.dropout,
            ).to(DTYPE)
        return self

    def sources(self, X) -> FusionSources:
        contexts = check_contexts(X)
        return FusionSources(
            conv=self.conv_expert.context_states(contexts),
            graph=self.graph_expert.context_nodes(contexts),
            review=self.review_expert.context_sentences(contexts),
        )

    def _dialog(self, X):
        seqs = []
        for x in X:
            words = list(x.context_words if isinstance(x, RecExample) else x)[-self.max_context :]
            seqs.append(words or [START])
        return pad_batch(seqs, PAD)

    def _memories(self, src: FusionSources, X_enc, X_len):
        mems = []
        for k, name in enumerate(SOURCE_NAMES):
            padded, lengths = _pad_sources(getattr(src, name), self.source_dims_[k])
            mems.append(self.module_.memory(k, padded, lengths))
        mems.append((X_enc, key_padding_mask(X_len, X_enc.shape[1])))
        return mems

    def _gold(self, X):
        return [list(x.response_words)[: self.max_response - 1] + [EOS] for x in X]

    def _batch_loss(self, X, src):
        words, wlen = self._dialog(X)
        enc = self.module_.encode_dialog(words, wlen)
        gold = self._gold(X)
        inputs, _ = pad_batch([[START] + g[:-1] for g in gold], PAD)
        targets, tlen = pad_batch(gold, PAD)
        logits = self.module_.decode(inputs, self._memories(src, enc, wlen))
        logp = torch.log_softmax(logits, dim=-1)
        valid = torch.arange(targets.shape[1])[None, :] < tlen[:, None]
        nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
        return (nll * valid).sum(), int(valid.sum())

    def fit(self, X, y=None, corpus=None, sources: FusionSources | None = None):
        if corpus is None:
            raise ValueError("ResponseGenerator.fit needs the corpus")
        X = [x for x in X if isinstance(x, RecExample)]
        self.build(corpus)
        src = sources if sources is not None else self.sources(X)
        rng = np.random.default_rng(self.random_state)
        self.optimizer_ = OptimizerState(lr=self.learning_rate, clip_norm=self.clip_norm, weight_decay=self.weight_decay)
        self.loss_history_ = []
        with torch.random.fork_rng():
            torch.manual_seed(self.random_state + 1)
            for _ in range(self.n_epochs):
                self.module_.train()
                perm = rng.permutation(len(X))
                total, count = 0.0, 0
                for start in range(0, len(X), self.batch_size):
                    idx = perm[start : start + self.batch_size]
                    for p in self.module_.parameters():
                        p.grad = None
                    loss, n_terms = self._batch_loss([X[i] for i in idx], src.subset(idx))
                    if not torch.isfinite(loss):
                        raise NumericError("generator: non-finite training loss")
                    loss.backward()
                    adam_step(self.module_, self.optimizer_)
                    total += float(loss.detach())
                    count += n_terms
                self.loss_history_.append(total / max(count, 1))
        self.module_.eval()
        return self

    @torch.no_grad()
    def next_token_logits(self, X, prefix_tokens, sources: FusionSources | None = None):
        """Decoder logits for teacher-forced ``prefix_tokens`` (batch, L)."""
        check_is_fitted(self, "module_")
        self.module_.eval()
        src = sources if sources is not None else self.sources(X)
        words, wlen = self._dialog(X)
        enc = self.module_.encode_dialog(words, wlen)
        return self.module_.decode(torch.as_tensor(prefix_tokens), self._memories(src, enc, wlen))

    @torch.no_grad()
    def generate(self, X, max_len: int | None = None, sources: FusionSources | None = None) -> list[list[int]]:
        """Greedy decoding; stops at the end marker (not emitted) or ``max_len``.

        The end marker is suppressed at the first step so every response has
        at least one token.
        """
        check_is_fitted(self, "module_")
        self.module_.eval()
        max_len = min(max_len or self.max_response, self.max_response)
        src = sources if sources is not None else self.sources(X)
        words, wlen = self._dialog(X)
        enc = self.module_.encode_dialog(words, wlen)
        mems = self._memories(src, enc, wlen)
        bias = torch.zeros(len(X), self.n_words_)
        if self.bias_strength > 0:
            if self.recommender is None:
                raise ValueError("bias_strength > 0 needs a recommender")
            top = self.recommender.predict(check_contexts(X))
            for i, item in enumerate(top):
                bias[i, self.item_name_tokens_.get(int(item), [])] = self.bias_strength
        tokens = torch.full((len(X), 1), START, dtype=torch.long)
        done = torch.zeros(len(X), dtype=torch.bool)
        out = [[] for _ in X]
        for step in range(max_len):
            logits = self.module_.decode(tokens, mems)[:, -1] + bias
            logits[:, PAD] = float("-inf")
            if step == 0:
                logits[:, EOS] = float("-inf")
            nxt = logits.argmax(dim=-1)
            for i in range(len(X)):
                if not done[i]:
                    if int(nxt[i]) == EOS:
                        done[i] = True
                    else:
                        out[i].append(int(nxt[i]))
            if bool(done.all()):
                break
            tokens = torch.cat([tokens, nxt[:, None]], dim=1)
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        check_is_fitted(self, "module_")
        return {k: v.detach().numpy().copy() for k, v in self.module_.state_dict().items()}

    def load_state_arrays(self, corpus, arrays):
        self.build(corpus)
        self.module_.load_state_dict({k: torch.from_numpy(np.asarray(v)) for k, v in arrays.items()})
        self.module_.eval()
        return self


def detokenize(tokens, words) -> str:
    return " ".join(words[t] for t in tokens)
