import numpy as np
import pytest
import torch

from mccrs.corpus import Corpus, ReviewDoc, SyntheticSpec, extract_examples, generate_synthetic, split_corpus
from mccrs.diagnostics import check_expert
from mccrs.evaluation import PopularityRecommender, evaluate_recommender
from mccrs.nn_core import ConfigError
from mccrs.review_expert import ReviewEncoder, ReviewExpert, impute_missing

REVIEW_ONLY = SyntheticSpec(
    n_items=40,
    n_clusters=4,
    n_attributes=20,
    n_conversations=400,
    n_generic_words=10,
    sequence_signal=0.6,
    graph_signal=0.0,
    review_signal=1.0,
)


# ------------------------------------------------------------ imputation


def test_impute_fills_missing_with_mean():
    present = torch.tensor([[1.0, 2.0], [3.0, 6.0]])
    table = impute_missing(present, [0, 2], 3)
    assert torch.equal(table, torch.tensor([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]))


def test_impute_all_present_is_identity():
    present = torch.randn(4, 3)
    assert torch.equal(impute_missing(present, [0, 1, 2, 3], 4), present)


def test_impute_nothing_present_raises():
    with pytest.raises(ValueError):
        impute_missing(torch.zeros(0, 3), [], 4)


def test_impute_preserves_mean():
    g = torch.Generator().manual_seed(0)
    present = torch.randn(5, 3, generator=g)
    table = impute_missing(present, [1, 3, 4, 7, 8], 10)
    assert torch.allclose(table.mean(0), present.mean(0), atol=1e-12)


# --------------------------------------------------------------- pooling


def _encoder():
    torch.manual_seed(0)
    return ReviewEncoder(n_words=12, dim=4, n_layers=1, heads=2, max_tokens=8, dropout=0.0).eval()


def test_single_sentence_review_is_block_of_sentence():
    enc = _encoder()
    D = torch.randn(1, 1, 4)
    with torch.no_grad():
        out = enc.encode_reviews(D, torch.tensor([1]))
        ref = enc.sentence_block(D, None)[:, 0]
    assert torch.allclose(out, ref, atol=1e-12)


def test_duplicate_sentences_give_one_row():
    enc = _encoder()
    row = torch.randn(1, 1, 4)
    with torch.no_grad():
        one = enc.encode_reviews(row, torch.tensor([1]))
        three = enc.encode_reviews(row.expand(1, 3, 4).contiguous(), torch.tensor([3]))
    assert torch.allclose(one, three, atol=1e-10)


def test_sentence_order_does_not_matter():
    enc = _encoder()
    D = torch.randn(1, 4, 4)
    with torch.no_grad():
        a = enc.encode_reviews(D, torch.tensor([4]))
        b = enc.encode_reviews(D[:, [2, 0, 3, 1]], torch.tensor([4]))
    assert torch.allclose(a, b, atol=1e-12)


def test_padding_sentences_are_ignored():
    enc = _encoder()
    D = torch.randn(1, 2, 4)
    padded = torch.cat([D, torch.randn(1, 3, 4)], dim=1)
    with torch.no_grad():
        assert torch.allclose(
            enc.encode_reviews(D, torch.tensor([2])), enc.encode_reviews(padded, torch.tensor([2])), atol=1e-12
        )


def test_empty_sentence_rejected():
    enc = _encoder()
    with pytest.raises(ValueError):
        enc.encode_sentences(torch.zeros(1, 3, dtype=torch.long), torch.tensor([0]))


# ---------------------------------------------------------------- expert


def _twin_corpus(small_corpus):
    """Give items 0 and 1 identical reviews, drop reviews for item 2."""
    items = small_corpus.item_ids.tolist()
    by_item = {r.item: r for r in small_corpus.reviews}
    reviews = [r for r in small_corpus.reviews if r.item not in items[:3]]
    reviews += [ReviewDoc(items[0], by_item[items[0]].sentences), ReviewDoc(items[1], by_item[items[0]].sentences)]
    c = small_corpus
    return Corpus(c.entities, c.relations, c.words, c.conversations, c.triples, tuple(reviews)), items


def test_identical_reviews_give_identical_vectors(small_corpus):
    corpus, items = _twin_corpus(small_corpus)
    est = ReviewExpert(hidden_dim=8, dropout=0.0).pre_fit(corpus)
    est.module_.eval()
    with torch.no_grad():
        V = est.item_vectors()
    assert torch.allclose(V[0], V[1], atol=1e-12)
    assert items[2] in est.missing_items_.tolist()
    present = [i for i in range(len(items)) if items[i] not in est.missing_items_.tolist()]
    assert torch.allclose(V[2], V[present].mean(0), atol=1e-12)


def test_context_without_items_is_uniform(small_experts, small_corpus):
    est = small_experts["review"]
    attribute = next(e.id for e in small_corpus.entities if not e.is_item)
    h, P = est.expert_output([(attribute,), ()])
    np.testing.assert_array_equal(h, 0.0)
    np.testing.assert_allclose(P, 1 / len(est.items_))


def test_context_sentences(small_experts, small_corpus):
    est = small_experts["review"]
    item = int(small_corpus.item_ids[0])
    rows = est.context_sentences([(item,), ()])
    a, b = est.item_sentences_[item]
    assert rows[0].shape == (b - a, 8) and rows[1].shape == (0, 8)


def test_no_reviews_is_a_config_error(small_corpus):
    c = small_corpus
    bare = Corpus(c.entities, c.relations, c.words, c.conversations, c.triples, ())
    with pytest.raises(ConfigError):
        ReviewExpert().pre_fit(bare)


def test_training_is_deterministic(small_corpus):
    X = small_corpus.examples()
    a = ReviewExpert(hidden_dim=8, n_epochs=1, random_state=2).fit(X, corpus=small_corpus)
    b = ReviewExpert(hidden_dim=8, n_epochs=1, random_state=2).fit(X, corpus=small_corpus)
    assert a.loss_history_ == b.loss_history_
    np.testing.assert_array_equal(a.predict_proba(X[:4]), b.predict_proba(X[:4]))


def test_review_signal_beats_popularity():
    corpus = generate_synthetic(REVIEW_ONLY, seed=0)
    train_c, _, test_c = split_corpus(corpus.conversations, seed=0)
    train = [x for c in train_c for x in extract_examples(c, corpus.item_ids)]
    test = [x for c in test_c for x in extract_examples(c, corpus.item_ids)]
    est = ReviewExpert(hidden_dim=16, n_layers=1, n_epochs=10, learning_rate=3e-3, batch_size=64).fit(
        train, corpus=corpus
    )
    pop = PopularityRecommender().fit(train, corpus=corpus)
    assert evaluate_recommender(est, test).recall_10 > evaluate_recommender(pop, test).recall_10 + 0.1


def test_gradient_check():
    assert check_expert("review", seed=0, max_coords=None) <= 1e-4
