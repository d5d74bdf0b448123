"""Builds estimators from a RunConfig and trains them in dependency order."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .chairbot import ChairBot
from .config import RunConfig
from .conv_expert import ConvExpert
from .corpus import Corpus, RecExample, split_corpus
from .generator import ResponseGenerator
from .graph_expert import GraphExpert
from .review_expert import ReviewExpert

EXPERT_NAMES = ("conv", "graph", "review")


def _opt(config: RunConfig) -> dict:
    return asdict(config.optimizer)


def make_conv(config: RunConfig) -> ConvExpert:
    return ConvExpert(**asdict(config.conv), **_opt(config), random_state=config.seed)


def make_graph(config: RunConfig) -> GraphExpert:
    return GraphExpert(**asdict(config.graph), **_opt(config), random_state=config.seed)


def make_review(config: RunConfig) -> ReviewExpert:
    return ReviewExpert(**asdict(config.review), **_opt(config), random_state=config.seed)


MAKERS = {"conv": make_conv, "graph": make_graph, "review": make_review}


def make_chairbot(config: RunConfig, experts: dict) -> ChairBot:
    return ChairBot(
        experts=[(name, experts[name]) for name in EXPERT_NAMES if name in experts],
        n_epochs=config.gate.n_epochs,
        joint_finetune=config.gate.joint_finetune,
        **_opt(config),
        random_state=config.seed,
    )


def make_generator(config: RunConfig, experts: dict, chairbot=None) -> ResponseGenerator:
    return ResponseGenerator(
        experts["conv"],
        experts["graph"],
        experts["review"],
        recommender=chairbot,
        **asdict(config.decoder),
        **_opt(config),
        random_state=config.seed,
    )


@dataclass
class Splits:
    train: list[RecExample]
    valid: list[RecExample]
    test: list[RecExample]

    def get(self, name: str) -> list[RecExample]:
        if name not in ("train", "valid", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def make_splits(corpus: Corpus, config: RunConfig) -> Splits:
    train, valid, test = split_corpus(corpus.conversations, config.split_ratios, config.seed)
    return Splits(corpus.examples(train), corpus.examples(valid), corpus.examples(test))


def train_expert(name: str, corpus: Corpus, train: list[RecExample], config: RunConfig):
    return MAKERS[name](config).fit(train, corpus=corpus)


def train_experts(corpus: Corpus, train: list[RecExample], config: RunConfig, names=EXPERT_NAMES) -> dict:
    return {name: train_expert(name, corpus, train, config) for name in names}


def train_chairbot(experts: dict, train: list[RecExample], config: RunConfig) -> ChairBot:
    return make_chairbot(config, experts).fit(train)
