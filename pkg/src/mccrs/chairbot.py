"""Mixture-of-experts fusion of the expert item distributions."""

from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .base import check_contexts, check_targets, rank_items
from .nn_core import DTYPE, NumericError, OptimizerState, adam_step, cross_entropy_loss

logger = logging.getLogger(__name__)


def fuse_inputs(hidden, proba):
    """Concatenate an expert's hidden vector with its item distribution."""
    if isinstance(hidden, torch.Tensor) or isinstance(proba, torch.Tensor):
        return torch.cat([torch.as_tensor(hidden), torch.as_tensor(proba)], dim=-1)
    return np.concatenate([np.asarray(hidden, dtype=float), np.asarray(proba, dtype=float)], axis=-1)


def normalize_scores(beta: torch.Tensor) -> torch.Tensor:
    """lambda_b = beta_b / sum(beta); rows summing to zero fall back to uniform."""
    total = beta.sum(dim=-1, keepdim=True)
    zero = total == 0
    if bool(zero.any()):
        logger.warning("all gate scores are zero for %d rows; using uniform weights", int(zero.sum()))
    safe = torch.where(zero, torch.ones_like(total), total)
    lam = beta / safe
    return torch.where(zero, torch.full_like(beta, 1.0 / beta.shape[-1]), lam)


def recommend(lam, probas):
    """P_rec = sum_b lambda_b P_b for (n, B) weights and a list of (n, V) distributions."""
    lam = torch.as_tensor(lam)
    stacked = torch.stack([torch.as_tensor(p) for p in probas], dim=1)
    return (lam.unsqueeze(-1) * stacked).sum(dim=1)


class Gate(nn.Module):
    """One linear scorer per expert, mapped through softplus to beta > 0."""

    def __init__(self, input_dims):
        super().__init__()
        self.scorers = nn.ModuleList(nn.Linear(d, 1) for d in input_dims)
        for s in self.scorers:
            nn.init.zeros_(s.weight)
            nn.init.zeros_(s.bias)

    def scores(self, fused):
        return torch.cat([F.softplus(s(x)) for s, x in zip(self.scorers, fused)], dim=-1)

    def forward(self, fused):
        return normalize_scores(self.scores(fused))


class ChairBot(BaseEstimator):
    """Gate that weights a set of already trained experts.

    Parameters
    ----------
    experts : list of (name, estimator)
        Fitted experts exposing ``expert_output`` and ``items_``.
    joint_finetune : bool
        Also update the expert parameters through the fused loss.  Off by
        default: experts stay frozen and only the gate trains.
    """

    def __init__(
        self,
        experts,
        learning_rate=1e-4,
        batch_size=256,
        n_epochs=50,
        weight_decay=0.01,
        clip_norm=5.0,
        joint_finetune=False,
        random_state=0,
    ):
        self.experts = experts
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_epochs = n_epochs
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.joint_finetune = joint_finetune
        self.random_state = random_state

    def _check_experts(self):
        if not self.experts:
            raise ValueError("ChairBot needs at least one expert")
        for name, est in self.experts:
            try:
                check_is_fitted(est, "module_")
            except NotFittedError as e:
                raise NotFittedError(f"expert {name!r} is not trained") from e
        items = self.experts[0][1].items_
        for name, est in self.experts[1:]:
            if not np.array_equal(est.items_, items):
                raise ValueError(f"expert {name!r} ranks a different item set")
        return items

    def _expert_outputs(self, contexts):
        hs, ps = [], []
        for _, est in self.experts:
            h, p = est.expert_output(contexts)
            hs.append(torch.from_numpy(h))
            ps.append(torch.from_numpy(p))
        return hs, ps

    def build(self):
        self.items_ = self._check_experts()
        self.item_index_ = {int(i): k for k, i in enumerate(self.items_)}
        dims = [est.hidden_dim + len(self.items_) for _, est in self.experts]
        with torch.random.fork_rng():
            torch.manual_seed(self.random_state)
            self.gate_ = Gate(dims).to(DTYPE)
        return self

    def fit(self, X, y=None, corpus=None):
        self.build()
        contexts = check_contexts(X)
        cols = torch.from_numpy(check_targets(X, y, self.item_index_))
        rng = np.random.default_rng(self.random_state)
        params = dict(self.gate_.named_parameters())
        if self.joint_finetune:
            for name, est in self.experts:
                params.update({f"{name}.{k}": p for k, p in est.module_.named_parameters()})
        else:
            hs, ps = self._expert_outputs(contexts)
            fused = [fuse_inputs(h, p) for h, p in zip(hs, ps)]
        self.optimizer_ = OptimizerState(lr=self.learning_rate, clip_norm=self.clip_norm, weight_decay=self.weight_decay)
        self.loss_history_ = []
        n = len(contexts)
        with torch.random.fork_rng():
            torch.manual_seed(self.random_state + 1)
            for _ in range(self.n_epochs):
                perm = rng.permutation(n)
                total = 0.0
                for start in range(0, n, self.batch_size):
                    idx = perm[start : start + self.batch_size]
                    for p in params.values():
                        p.grad = None
                    if self.joint_finetune:
                        batch_fused, batch_ps = [], []
                        for _, est in self.experts:
                            est.module_.train()
                            h, p = est._outputs([contexts[i] for i in idx])
                            batch_fused.append(fuse_inputs(h, p))
                            batch_ps.append(p)
                    else:
                        t_idx = torch.from_numpy(idx)
                        batch_fused = [f[t_idx] for f in fused]
                        batch_ps = [p[t_idx] for p in ps]
                    P = recommend(self.gate_(batch_fused), batch_ps)
                    loss = cross_entropy_loss(P, cols[idx], check=False, reduction="sum")
                    if not torch.isfinite(loss):
                        raise NumericError("ChairBot: non-finite training loss")
                    loss.backward()
                    adam_step(params, self.optimizer_)
                    total += float(loss.detach())
                self.loss_history_.append(total / max(n, 1))
        for _, est in self.experts:
            est.module_.eval()
        return self

    def loss(self, X, y=None) -> float:
        """Mean fused cross-entropy of the current gate on ``(X, y)``."""
        contexts = check_contexts(X)
        cols = check_targets(X, y, self.item_index_)
        with torch.no_grad():
            P = self._fused_proba(contexts)[1]
            return float(cross_entropy_loss(P, cols, check=False))

    @torch.no_grad()
    def _fused_proba(self, contexts):
        check_is_fitted(self, "gate_")
        hs, ps = self._expert_outputs(contexts)
        lam = self.gate_([fuse_inputs(h, p) for h, p in zip(hs, ps)])
        return lam, recommend(lam, ps)

    def gate_weights(self, X) -> np.ndarray:
        """(n, n_experts) normalised importance scores."""
        return self._fused_proba(check_contexts(X))[0].numpy()

    def predict_proba(self, X) -> np.ndarray:
        return self._fused_proba(check_contexts(X))[1].numpy()

    def rank(self, X) -> np.ndarray:
        return rank_items(self.predict_proba(X), self.items_)

    def predict(self, X) -> np.ndarray:
        return self.rank(X)[:, 0]

    def state_arrays(self) -> dict[str, np.ndarray]:
        check_is_fitted(self, "gate_")
        return {k: v.detach().numpy().copy() for k, v in self.gate_.state_dict().items()}

    def load_state_arrays(self, arrays):
        self.build()
        self.gate_.load_state_dict({k: torch.from_numpy(np.asarray(v)) for k, v in arrays.items()})
        return self
