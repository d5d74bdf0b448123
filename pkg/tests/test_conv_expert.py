import math

import numpy as np
import pytest
import torch
from sklearn.exceptions import NotFittedError

from mccrs.conv_expert import MASK_TOKEN, TOKEN_OFFSET, ConvEncoder, ConvExpert, mask_cloze
from mccrs.corpus import SyntheticSpec, cluster_of_name, generate_synthetic
from mccrs.diagnostics import check_expert
from mccrs.nn_core import ConfigError, LAYER_NORM_EPS

ONE_CLUSTER = SyntheticSpec(n_items=10, n_clusters=1, n_attributes=4, n_conversations=60, n_generic_words=10)
TWO_CLUSTERS = SyntheticSpec(
    n_items=20, n_clusters=2, n_attributes=10, n_conversations=300, n_generic_words=10, sequence_signal=0.9
)


def _encoder(n_layers=0, dim=4, max_len=6, order="ffn_first"):
    torch.manual_seed(0)
    return ConvEncoder(n_entities=8, n_items=5, dim=dim, n_layers=n_layers, heads=2, max_len=max_len, dropout=0.0, order=order).eval()


def _ln(x):
    x = np.asarray(x)
    return (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + LAYER_NORM_EPS)


# ----------------------------------------------------------------- embed


def test_embed_zero_tables():
    enc = _encoder()
    with torch.no_grad():
        enc.entity_emb.weight.zero_()
        enc.pos_emb.weight.zero_()
    assert torch.equal(enc.embed(torch.tensor([[3, 4, 5]])), torch.zeros(1, 3, 4))


def test_embed_one_hot_rows():
    enc = _encoder()
    with torch.no_grad():
        enc.entity_emb.weight.zero_()
        enc.entity_emb.weight[:4] = torch.eye(4)
        enc.pos_emb.weight.zero_()
    assert torch.equal(enc.embed(torch.tensor([[2, 0, 3]]))[0], torch.eye(4)[[2, 0, 3]])


def test_embed_rowwise_sum():
    enc = _encoder()
    tokens = [[5, 1, 7, 2]]
    s, p = enc.entity_emb.weight.detach().numpy(), enc.pos_emb.weight.detach().numpy()
    ref = np.array([[s[tok][j] + p[k][j] for j in range(4)] for k, tok in enumerate(tokens[0])])
    with torch.no_grad():
        np.testing.assert_array_equal(enc.embed(torch.tensor(tokens))[0].numpy(), ref)


def test_embed_too_long_raises_but_expert_truncates(small_corpus):
    enc = _encoder(max_len=3)
    with pytest.raises(ValueError):
        enc.embed(torch.zeros(1, 4, dtype=torch.long))
    est = ConvExpert(hidden_dim=4, max_len=3, random_state=0).pre_fit(small_corpus)
    est.module_.eval()
    long_ctx = [31, 32, 33, 34, 35, 36]
    h_long, P_long = est.expert_output([long_ctx])
    h_tail, P_tail = est.expert_output([long_ctx[-2:]])
    np.testing.assert_array_equal(h_long, h_tail)
    np.testing.assert_array_equal(P_long, P_tail)


# ----------------------------------------------------------------- cloze


def test_cloze_high_p_masks_nearly_everything(rng):
    rates = [len(mask_cloze(np.arange(2, 52), 0.99, rng)[1]) / 50 for _ in range(200)]
    assert np.mean(rates) > 0.98


def test_cloze_length_one_always_masked(rng):
    for _ in range(100):
        masked, pos, orig = mask_cloze([7], 0.01, rng)
        assert masked.tolist() == [MASK_TOKEN] and pos.tolist() == [0] and orig.tolist() == [7]


def test_cloze_records_originals(rng):
    seq = np.arange(10, 30)
    masked, pos, orig = mask_cloze(seq, 0.5, rng)
    assert np.array_equal(orig, seq[pos])
    assert np.all(masked[pos] == MASK_TOKEN)
    keep = np.setdiff1d(np.arange(20), pos)
    assert np.array_equal(masked[keep], seq[keep])


def test_cloze_rate_matches_binomial(rng):
    hits = sum(len(mask_cloze(np.arange(2, 52), 0.4, rng)[1]) for _ in range(10_000))
    assert abs(hits / 500_000 - 0.4) <= 0.01


def test_cloze_empty_sequence():
    with pytest.raises(ValueError):
        mask_cloze([], 0.4, np.random.default_rng(0))


# ---------------------------------------------------------------- encode


def test_encode_zero_layers_is_identity():
    enc = _encoder(n_layers=0)
    H = torch.randn(2, 3, 4)
    assert torch.equal(enc.encode(H, torch.tensor([3, 2])), H)


@pytest.mark.parametrize("order", ["ffn_first", "attn_first"])
def test_encode_zero_blocks_hand_trace(order):
    enc = _encoder(n_layers=1, order=order)
    with torch.no_grad():
        for name, p in enc.blocks.named_parameters():
            if "norm" not in name:
                p.zero_()
    x = np.array([[[0.5, -1.0, 2.0, 0.25]]])
    with torch.no_grad():
        out = enc.encode(torch.tensor(x), torch.tensor([1])).numpy()
    # both sublayers emit zeros, leaving two layer norms of the input
    np.testing.assert_allclose(out, _ln(_ln(x)), atol=1e-12)


def test_padding_does_not_change_real_positions():
    enc = _encoder(n_layers=2)
    short = torch.tensor([[4, 5, 6, 0]])
    longer = torch.tensor([[4, 5, 6, 0, 0, 0]])
    with torch.no_grad():
        a = enc(short, torch.tensor([3]))[0, :3]
        b = enc(longer, torch.tensor([3]))[0, :3]
    assert torch.allclose(a, b, atol=1e-12)


# --------------------------------------------------------------- predict


def test_zero_head_is_uniform():
    enc = _encoder()
    P = enc.predict_items(torch.randn(3, 4))
    assert torch.allclose(P, torch.full((3, 5), 0.2))


def test_bias_dominates():
    torch.manual_seed(0)
    enc = ConvEncoder(8, 100, 4, 0, 2, 6, 0.0, "ffn_first")
    with torch.no_grad():
        enc.head.bias[17] = 10.0
    with torch.no_grad():
        assert float(enc.predict_items(torch.randn(1, 4))[0, 17]) > 0.99


def test_random_head_is_a_distribution():
    enc = _encoder()
    with torch.no_grad():
        enc.head.weight.normal_()
        enc.head.bias.normal_()
    P = enc.predict_items(torch.randn(6, 4))
    assert torch.allclose(P.sum(-1), torch.ones(6), atol=1e-6)
    assert bool((P >= 0).all())


# ----------------------------------------------------------------- train


@pytest.fixture(scope="module")
def one_cluster():
    return generate_synthetic(ONE_CLUSTER, seed=0)


def test_first_loss_is_log_items(one_cluster):
    X = one_cluster.examples()
    est = ConvExpert(hidden_dim=8, n_epochs=1, batch_size=len(X), random_state=0).fit(X, corpus=one_cluster)
    assert math.isclose(est.loss_history_[0], math.log(ONE_CLUSTER.n_items), rel_tol=1e-9)


def test_loss_decreases_over_200_steps(one_cluster):
    X = one_cluster.examples()
    steps_per_epoch = math.ceil(len(X) / 16)
    n_epochs = math.ceil(200 / steps_per_epoch)
    est = ConvExpert(hidden_dim=8, n_epochs=n_epochs, batch_size=16, learning_rate=1e-3).fit(X, corpus=one_cluster)
    assert est.loss_history_[-1] < est.loss_history_[0]


def test_training_is_deterministic(one_cluster):
    X = one_cluster.examples()
    a = ConvExpert(hidden_dim=8, n_epochs=3, random_state=4).fit(X, corpus=one_cluster)
    b = ConvExpert(hidden_dim=8, n_epochs=3, random_state=4).fit(X, corpus=one_cluster)
    assert a.loss_history_ == b.loss_history_
    assert all(np.array_equal(a.state_arrays()[k], v) for k, v in b.state_arrays().items())


def test_only_masked_item_positions_count(one_cluster):
    est = ConvExpert(hidden_dim=8, mask_prob=0.5, random_state=0).pre_fit(one_cluster)
    # entity 10 is an attribute and never a label; only the appended target can be
    ctx, cols = [(10,)], np.array([0])
    for s in range(20):
        out = est._batch_loss(ctx, cols, np.random.default_rng(s))
        _, pos, _ = mask_cloze([10 + TOKEN_OFFSET, TOKEN_OFFSET], 0.5, np.random.default_rng(s))
        if 1 in pos:
            assert out[1] == 1
        else:
            assert out is None


# ---------------------------------------------------------- expert output


def test_empty_context_is_deterministic_prior(small_experts):
    est = small_experts["conv"]
    h1, P1 = est.expert_output([()])
    h2, P2 = est.expert_output([(), ()])
    np.testing.assert_array_equal(P1[0], est.expert_output([()])[1][0])
    np.testing.assert_allclose(P2[0], P2[1], atol=1e-15)
    np.testing.assert_allclose(h1[0], h2[0], atol=1e-12)


def test_output_is_a_distribution(small_experts, small_splits):
    P = small_experts["conv"].predict_proba(small_splits[2])
    np.testing.assert_allclose(P.sum(1), 1.0, atol=1e-6)
    assert (P >= 0).all()


def test_trained_toy_predicts_context_cluster():
    corpus = generate_synthetic(TWO_CLUSTERS, seed=0)
    est = ConvExpert(hidden_dim=16, n_epochs=40, learning_rate=3e-3, batch_size=64, random_state=0).fit(
        corpus.examples(), corpus=corpus
    )
    names = [e.name for e in corpus.entities]
    for c in (0, 1):
        ctx = [e.id for e in corpus.entities if cluster_of_name(e.name) == c and not e.is_item]
        top = int(est.predict([ctx])[0])
        assert cluster_of_name(names[top]) == c


def test_order_sensitive(small_experts):
    est = small_experts["conv"]
    h_ab, _ = est.expert_output([(31, 40)])
    h_ba, _ = est.expert_output([(40, 31)])
    assert not np.allclose(h_ab, h_ba)


def test_context_states_cover_context_positions(small_experts):
    states = small_experts["conv"].context_states([(31, 32, 33), ()])
    assert states[0].shape == (3, 8) and states[1].shape == (0, 8)


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        ConvExpert().predict_proba([(1,)])


@pytest.mark.parametrize("kwargs", [{"mask_prob": 0.0}, {"mask_prob": 1.0}, {"max_len": 0}, {"hidden_dim": 5}])
def test_config_validation(small_corpus, kwargs):
    with pytest.raises(ConfigError):
        ConvExpert(**kwargs).pre_fit(small_corpus)


def test_gradient_check():
    assert check_expert("conv", seed=0, max_coords=None) <= 1e-4


def test_sklearn_params_round_trip():
    est = ConvExpert(hidden_dim=16, mask_prob=0.2)
    assert est.get_params()["mask_prob"] == 0.2
    assert est.set_params(n_layers=3).n_layers == 3
    assert TOKEN_OFFSET == 2
