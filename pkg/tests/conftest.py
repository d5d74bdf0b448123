import sys
from pathlib import Path

import numpy as np
import pytest

from mccrs.config import RunConfig
from mccrs.conv_expert import ConvExpert
from mccrs.corpus import SyntheticSpec, generate_synthetic, split_corpus
from mccrs.graph_expert import GraphExpert
from mccrs.review_expert import ReviewExpert

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "scripts"))

SMALL_SPEC = SyntheticSpec(
    n_items=30,
    n_clusters=5,
    n_attributes=15,
    n_conversations=150,
    n_generic_words=15,
    cluster_words=3,
)

ACCEPTANCE_RESULTS: dict = {}


def fast_config(**sections) -> RunConfig:
    """Small widths and few epochs; enough to exercise every code path."""
    cfg = RunConfig().with_hidden_dim(8).with_overrides(
        optimizer={"learning_rate": 1e-2, "batch_size": 64},
        conv={"n_epochs": 3, "n_layers": 1},
        graph={"n_epochs": 5},
        review={"n_epochs": 2, "n_layers": 1},
        gate={"n_epochs": 5},
        decoder={"n_epochs": 2, "n_layers": 1, "max_response": 6},
    )
    return cfg.with_overrides(**sections) if sections else cfg


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic(SMALL_SPEC, seed=0)


@pytest.fixture(scope="session")
def small_splits(small_corpus):
    train, valid, test = split_corpus(small_corpus.conversations, (8, 1, 1), 0)
    return small_corpus.examples(train), small_corpus.examples(valid), small_corpus.examples(test)


@pytest.fixture(scope="session")
def small_experts(small_corpus, small_splits):
    """Briefly trained experts on the small corpus (shared, treat read-only)."""
    train = small_splits[0]
    common = dict(hidden_dim=8, learning_rate=1e-2, batch_size=64, random_state=0)
    return {
        "conv": ConvExpert(n_epochs=4, **common).fit(train, corpus=small_corpus),
        "graph": GraphExpert(n_epochs=8, **common).fit(train, corpus=small_corpus),
        "review": ReviewExpert(n_epochs=3, **common).fit(train, corpus=small_corpus),
    }


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[num]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {detail}")
