"""Ranking and diversity metrics, the popularity baseline, ablation and
parameter sweeps."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .base import check_contexts, check_targets, rank_items
from .chairbot import ChairBot
from .config import RunConfig
from .corpus import Corpus, RecExample, popularity_ranking
from . import pipeline

RECALL_KS = (1, 10, 50)
DISTINCT_NS = (2, 3, 4)

ABLATION_VARIANTS = (
    "conversation only",
    "graph only",
    "review only",
    "w/o conversation",
    "w/o graph",
    "w/o review",
    "full",
)
_VARIANT_EXPERTS = {
    "conversation only": ("conv",),
    "graph only": ("graph",),
    "review only": ("review",),
    "w/o conversation": ("graph", "review"),
    "w/o graph": ("conv", "review"),
    "w/o review": ("conv", "graph"),
    "full": ("conv", "graph", "review"),
}

DEFAULT_GRIDS = {
    "mask_prob": (0.2, 0.4, 0.6, 0.8),
    "hidden_dim": (32, 64, 128, 256),
}


def recall_at_k(ranked: Sequence[int], target: int, k: int) -> int:
    """1 if ``target`` is among the first ``k`` ranked items, else 0."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ranked = list(ranked)
    if target not in ranked:
        raise ValueError(f"target {target} is not a ranked item id")
    return int(target in ranked[:k])


def distinct_n(responses: Sequence[Sequence[int]], n: int) -> float:
    """Unique n-grams over total n-grams, pooled across all responses."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    grams = Counter()
    for r in responses:
        r = list(r)
        grams.update(tuple(r[i : i + n]) for i in range(len(r) - n + 1))
    total = sum(grams.values())
    return len(grams) / total if total else 0.0


@dataclass
class MetricReport:
    recall_1: float
    recall_10: float
    recall_50: float
    n_examples: int
    fingerprint: str = ""
    distinct_2: float | None = None
    distinct_3: float | None = None
    distinct_4: float | None = None

    def __post_init__(self):
        if not (self.recall_1 <= self.recall_10 <= self.recall_50):
            raise ValueError(f"recall not monotone in k: {self.recall_1}, {self.recall_10}, {self.recall_50}")

    def to_dict(self) -> dict:
        return asdict(self)


def target_ranks(model, examples) -> np.ndarray:
    """0-based position of every example's target in the model's ranking."""
    items = np.asarray(model.items_)
    P = model.predict_proba(examples)
    cols = check_targets(examples, None, {int(i): k for k, i in enumerate(items)})
    ranked = rank_items(P, items)
    return np.argmax(ranked == items[cols][:, None], axis=1)


def evaluate_recommender(model, examples, fingerprint: str = "", responses=None) -> MetricReport:
    """Recall@1/10/50 with every item as a candidate, averaged over examples."""
    if not len(examples):
        raise ValueError("cannot evaluate on an empty example set")
    ranks = target_ranks(model, examples)
    recalls = {k: float(np.mean(ranks < k)) for k in RECALL_KS}
    extra = {}
    if responses is not None:
        extra = {f"distinct_{n}": distinct_n(responses, n) for n in DISTINCT_NS}
    return MetricReport(recalls[1], recalls[10], recalls[50], len(examples), fingerprint, **extra)


class PopularityRecommender(BaseEstimator):
    """Ranks items by how often they were the target in training."""

    def fit(self, X, y=None, corpus: Corpus | None = None):
        if corpus is None:
            raise ValueError("PopularityRecommender.fit needs the corpus")
        self.items_ = corpus.item_ids
        index = {int(i): k for k, i in enumerate(self.items_)}
        cols = check_targets(X, y, index) if len(X) else np.zeros(0, dtype=np.int64)
        counts = np.bincount(cols, minlength=len(self.items_)).astype(float)
        self.ranking_ = popularity_ranking([_Target(int(self.items_[c])) for c in cols], self.items_)
        # strictly decreasing scores along the ranking encode its tie-break
        scores = np.empty(len(self.items_))
        scores[[index[i] for i in self.ranking_]] = np.arange(len(self.items_), 0, -1, dtype=float)
        self.proba_ = (counts + 1e-12 * scores) / (counts + 1e-12 * scores).sum()
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "proba_")
        return np.tile(self.proba_, (len(check_contexts(X)), 1))

    def rank(self, X):
        return np.tile(np.asarray(self.ranking_), (len(check_contexts(X)), 1))


@dataclass(frozen=True)
class _Target:
    target_item: int


@dataclass
class AblationRow:
    variant: str
    report: MetricReport

    def to_dict(self) -> dict:
        return {"variant": self.variant, **self.report.to_dict()}


def run_ablation(corpus: Corpus, config: RunConfig, splits=None, experts: dict | None = None, split: str = "test"):
    """Seven rows: each expert alone, each leave-one-out gate, and the full gate.

    Single-expert rows evaluate the expert directly; the other rows train a
    fresh gate over their experts.  Pre-trained ``experts`` are reused.
    """
    splits = splits or pipeline.make_splits(corpus, config)
    experts = dict(experts or {})
    for name in pipeline.EXPERT_NAMES:
        if name not in experts:
            experts[name] = pipeline.train_expert(name, corpus, splits.train, config)
    fp = config.fingerprint(corpus.content_hash())
    rows = []
    for variant in ABLATION_VARIANTS:
        names = _VARIANT_EXPERTS[variant]
        if len(names) == 1:
            model = experts[names[0]]
        else:
            model = pipeline.train_chairbot({n: experts[n] for n in names}, splits.train, config)
        rows.append(AblationRow(variant, evaluate_recommender(model, splits.get(split), fp)))
    return rows


def run_sweep(corpus: Corpus, config: RunConfig, param: str, values=None, split: str = "test"):
    """Retrain and evaluate the full model once per value of ``param``.

    ``param`` is ``"mask_prob"`` or ``"hidden_dim"``.  Experts whose resolved
    configuration does not change between grid points are trained once.
    """
    if param not in DEFAULT_GRIDS:
        raise ValueError(f"unknown sweep parameter {param!r}; choose from {sorted(DEFAULT_GRIDS)}")
    values = tuple(DEFAULT_GRIDS[param] if values is None else values)
    if not values:
        raise ValueError("sweep grid is empty")
    splits = pipeline.make_splits(corpus, config)
    cache: dict = {}
    rows = []
    for v in values:
        cfg = config.with_overrides(conv={"mask_prob": v}) if param == "mask_prob" else config.with_hidden_dim(int(v))
        experts = {}
        for name in pipeline.EXPERT_NAMES:
            key = (name, json.dumps(getattr(cfg, name).__dict__, sort_keys=True))
            if key not in cache:
                cache[key] = pipeline.train_expert(name, corpus, splits.train, cfg)
            experts[name] = cache[key]
        chair = pipeline.train_chairbot(experts, splits.train, cfg)
        report = evaluate_recommender(chair, splits.get(split), cfg.fingerprint(corpus.content_hash()))
        rows.append({param: v, **{f"recall_{k}": getattr(report, f"recall_{k}") for k in RECALL_KS}})
    return rows


def format_table(rows, columns=None) -> str:
    """Aligned plain-text table of a list of flat dicts."""
    if not rows:
        return ""
    columns = columns or list(rows[0])

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.3f}"
        return "" if v is None else str(v)

    cells = [[fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def ablation_table(rows: list[AblationRow]) -> str:
    return format_table(
        [r.to_dict() for r in rows], ["variant", "recall_1", "recall_10", "recall_50", "n_examples"]
    )
