"""Estimator plumbing shared by the experts: input validation, the
minibatch training loop and parameter (de)serialisation."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .corpus import Corpus, RecExample
from .nn_core import DTYPE, NumericError, OptimizerState, adam_step


def check_contexts(X) -> list[tuple[int, ...]]:
    """Accept RecExamples or raw sequences of entity ids."""
    out = []
    for x in X:
        if isinstance(x, RecExample):
            out.append(tuple(int(e) for e in x.context_entities))
        else:
            out.append(tuple(int(e) for e in x))
    return out


def check_targets(X, y, item_index: dict[int, int]) -> np.ndarray:
    """Map target item ids to columns of the item distribution."""
    if y is None:
        y = [x.target_item for x in X]
    y = np.asarray(y, dtype=np.int64)
    if y.ndim != 1 or len(y) != len(X):
        raise ValueError(f"expected {len(X)} targets, got shape {y.shape}")
    try:
        return np.array([item_index[int(t)] for t in y], dtype=np.int64)
    except KeyError as e:
        raise ValueError(f"target {e.args[0]} is not an item id") from None


def check_entities(contexts, n_entities: int) -> None:
    for ctx in contexts:
        for e in ctx:
            if not 0 <= e < n_entities:
                raise ValueError(f"entity id {e} out of range [0, {n_entities})")


def rank_items(P: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Item ids per row by descending probability, ties by ascending id."""
    items = np.asarray(items)
    by_id = np.argsort(items, kind="stable")
    # stable sort over id-sorted columns keeps ties in ascending id order
    order = by_id[np.argsort(-P[:, by_id], axis=1, kind="stable")]
    return items[order]


class ExpertEstimator(BaseEstimator):
    """Base for the recommendation experts.

    Subclasses implement ``_build(corpus)``, ``_batch_loss(contexts, cols, rng)``
    returning ``(summed loss, number of terms)`` or None,
    and ``_outputs(contexts) -> (hidden, proba)``.  ``fit`` takes
    ``(X, y, corpus)`` where ``X`` is a list of contexts (entity-id sequences
    or RecExamples) and ``y`` the target item ids.
    """

    def _init_items(self, corpus: Corpus) -> None:
        self.items_ = corpus.item_ids
        self.item_index_ = {int(i): k for k, i in enumerate(self.items_)}
        self.n_entities_ = corpus.n_entities

    def fit(self, X, y=None, corpus: Corpus | None = None):
        if corpus is None:
            raise ValueError(f"{type(self).__name__}.fit needs the corpus")
        self.pre_fit(corpus)
        contexts = check_contexts(X)
        check_entities(contexts, corpus.n_entities)
        cols = check_targets(X, y, self.item_index_)
        self.train_loop(contexts, cols)
        return self

    def pre_fit(self, corpus: Corpus):
        """Build the module for ``corpus`` with freshly seeded parameters."""
        self._init_items(corpus)
        with torch.random.fork_rng():
            torch.manual_seed(self.random_state)
            self._build(corpus)
        self.module_.to(DTYPE)
        return self

    def make_optimizer(self) -> OptimizerState:
        return OptimizerState(lr=self.learning_rate, clip_norm=self.clip_norm, weight_decay=self.weight_decay)

    def train_loop(self, contexts, cols) -> None:
        rng = np.random.default_rng(self.random_state)
        self.optimizer_ = self.make_optimizer()
        self.loss_history_ = []
        n = len(contexts)
        with torch.random.fork_rng():
            torch.manual_seed(self.random_state + 1)
            for _ in range(self.n_epochs):
                self.module_.train()
                perm = rng.permutation(n)
                total, count = 0.0, 0
                for start in range(0, n, self.batch_size):
                    idx = perm[start : start + self.batch_size]
                    for p in self.module_.parameters():
                        p.grad = None
                    out = self._batch_loss([contexts[i] for i in idx], cols[idx], rng)
                    if out is None:
                        continue
                    loss, n_terms = out
                    if not torch.isfinite(loss):
                        raise NumericError(f"{type(self).__name__}: non-finite training loss")
                    loss.backward()
                    adam_step(self.module_, self.optimizer_)
                    total += float(loss.detach())
                    count += n_terms
                self.loss_history_.append(total / max(count, 1))
        self.module_.eval()

    # ---------------------------------------------------------- inference

    def _check(self):
        check_is_fitted(self, "module_")

    @torch.no_grad()
    def expert_output(self, X, batch_size: int = 512):
        """Context-level hidden vectors and item distributions, as numpy."""
        self._check()
        self.module_.eval()
        contexts = check_contexts(X)
        check_entities(contexts, self.n_entities_)
        hs, ps = [], []
        for start in range(0, len(contexts), batch_size):
            h, p = self._outputs(contexts[start : start + batch_size])
            hs.append(h.numpy())
            ps.append(p.numpy())
        if not hs:
            return np.zeros((0, self.hidden_dim)), np.zeros((0, len(self.items_)))
        return np.concatenate(hs), np.concatenate(ps)

    def transform(self, X):
        return self.expert_output(X)[0]

    def predict_proba(self, X):
        return self.expert_output(X)[1]

    def rank(self, X) -> np.ndarray:
        return rank_items(self.predict_proba(X), self.items_)

    def predict(self, X) -> np.ndarray:
        return self.rank(X)[:, 0]

    # ------------------------------------------------------ serialisation

    def state_arrays(self) -> dict[str, np.ndarray]:
        self._check()
        return {k: v.detach().numpy().copy() for k, v in self.module_.state_dict().items()}

    def load_state_arrays(self, corpus: Corpus, arrays: dict[str, np.ndarray]):
        self.pre_fit(corpus)
        state = {k: torch.from_numpy(np.asarray(v)) for k, v in arrays.items()}
        self.module_.load_state_dict(state)
        self.module_.eval()
        return self


def require_fitted(est, what: str) -> None:
    try:
        check_is_fitted(est)
    except NotFittedError as e:
        raise NotFittedError(f"{what} is not trained") from e


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = 0, min_len: int = 1):
    """Right-pad to a (batch, max_len) LongTensor; also return lengths."""
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    L = max(min_len, int(lengths.max()) if len(seqs) else 0)
    out = torch.full((len(seqs), L), pad, dtype=torch.long)
    for i, s in enumerate(seqs):
        if len(s):
            out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out, lengths
