import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from upstream_debias import autodiff as ad
from upstream_debias.autodiff import Tensor
from upstream_debias.errors import ConfigError, DataError, UsageError
from upstream_debias.model import (
    EncoderConfig,
    Head,
    add_adv_head,
    add_head,
    adversary_logits,
    classify,
    encode,
    encode_batch,
    harm_from_logits,
    harm_score,
    init_params,
    predict_batch,
    reinit_head,
)

from conftest import central_diff, rel_err, tiny_model

V = 40


def test_identical_tokens_pool_like_single_token():
    m = tiny_model(V)
    one = encode(m, [7]).data
    for L in (2, 5, 13):
        assert np.array_equal(encode(m, [7] * L).data, one)


@given(st.lists(st.integers(2, V - 1), min_size=1, max_size=12), st.randoms(use_true_random=False))
def test_permutation_invariance_exact(seq, rnd):
    m = tiny_model(V)
    shuffled = list(seq)
    rnd.shuffle(shuffled)
    assert encode(m, seq).data.tobytes() == encode(m, shuffled).data.tobytes()


def test_encode_matches_formula():
    m = tiny_model(V)
    seq = [3, 9, 9, 21]
    e = m.encoder
    pooled = e["embedding"].data[seq].mean(axis=0)
    z = np.tanh(pooled @ e["w1"].data + e["b1"].data) @ e["w2"].data + e["b2"].data
    np.testing.assert_allclose(encode(m, seq).data, z, rtol=1e-12, atol=1e-14)


def test_batch_rows_equal_single_encodes():
    m = tiny_model(V)
    seqs = [[2, 3], [5, 5, 6, 30], [11]]
    Z = encode_batch(m, seqs).data
    for i, s in enumerate(seqs):
        np.testing.assert_allclose(Z[i], encode(m, s).data, rtol=1e-13, atol=1e-15)


def test_drop_rows_equal_occluded_sequences():
    m = tiny_model(V)
    seqs = [[2, 3, 3, 4], [8]]
    Z = encode_batch(m, seqs, [(0, 3), (1, 8)]).data
    np.testing.assert_allclose(Z[2], encode(m, [2, 4]).data, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(Z[3], encode(m, [1]).data, rtol=1e-13, atol=1e-15)


def test_embedding_gradient_matches_finite_differences():
    m = tiny_model(V, embed_dim=4, hidden_dim=5, repr_dim=3)
    seq = [4, 4, 10, 17]
    ad.sq_norm(encode(m, seq)).backward()
    emb = m.encoder["embedding"]
    for idx in [(4, 0), (4, 3), (10, 1), (17, 2)]:
        fd = central_diff(lambda: ad.sq_norm(encode(m, seq)).item(), emb, idx)
        assert rel_err(emb.grad[idx], fd) < 1e-4
    assert not emb.grad[5].any()


@pytest.mark.parametrize("kind", ["mean-pool-mlp", "single-head-attention"])
def test_all_encoder_gradients_match_finite_differences(kind):
    m = tiny_model(V, encoder_kind=kind)
    seqs = [[3, 5, 7], [9, 9, 2]]
    loss = lambda: ad.cross_entropy(classify(m, encode_batch(m, seqs), "T"), [0, 1])  # noqa: E731
    loss().backward()
    rng = np.random.default_rng(0)
    for name, t in m.named_tensors():
        for _ in range(5):
            idx = tuple(int(rng.integers(s)) for s in t.shape)
            if name == "encoder.embedding":
                idx = (int(rng.choice([3, 5, 7, 9, 2])), idx[1])
            fd = central_diff(lambda: loss().item(), t, idx)
            assert abs(t.grad[idx] - fd) <= 1e-4 * max(1e-3, abs(fd)), name


def test_encode_errors():
    m = tiny_model(V)
    with pytest.raises(UsageError):
        encode(m, [])
    with pytest.raises(DataError):
        encode(m, [V])
    with pytest.raises(DataError):
        encode(m, [-1])


def test_classify_zero_head_uniform_and_bias_at_zero():
    m = tiny_model(V)
    h = m.heads["T"]
    h.weight.data[:] = 0
    z = encode(m, [3, 4])
    assert np.array_equal(ad.softmax(classify(m, z, "T")).data, [0.5, 0.5])
    h.bias.data[:] = [0.3, -1.2]
    assert np.array_equal(classify(m, Tensor(np.zeros(5)), "T").data, h.bias.data)


def test_softmax_of_random_head_sums_to_one():
    m = tiny_model(V, seed=3, n_classes=4, harmful=(1, 2))
    p = ad.softmax(classify(m, encode(m, [2, 9]), "T")).data
    assert abs(p.sum() - 1) < 1e-12


def test_unknown_task_is_usage_error():
    m = tiny_model(V)
    with pytest.raises(UsageError):
        classify(m, encode(m, [2]), "nope")


def test_harm_score_examples():
    h = Head(Tensor(np.zeros((3, 2))), Tensor(np.zeros(2)), (1,))
    assert harm_from_logits(Tensor([[0.0, 0.0]]), h).data[0] == 0.5
    h4 = Head(Tensor(np.zeros((3, 4))), Tensor(np.zeros(4)), (1, 2, 3))
    assert harm_from_logits(Tensor([[0.0] * 4]), h4).data[0] == 0.75


@given(st.lists(st.floats(-20, 20), min_size=4, max_size=4))
def test_harm_score_complement_identity(logits):
    h = Head(Tensor(np.zeros((3, 4))), Tensor(np.zeros(4)), (1, 2, 3))
    lg = Tensor([logits])
    harm = harm_from_logits(lg, h).data[0]
    p = ad.softmax(lg).data[0]
    assert 0.0 <= harm <= 1.0
    assert abs(harm - (1 - p[0])) < 1e-12


def test_harm_score_is_probability():
    m = tiny_model(V, n_classes=3, harmful=(2,))
    s = harm_score(m, [3, 4, 5], "T")
    p = ad.softmax(classify(m, encode(m, [3, 4, 5]), "T")).data
    assert s == p[2]


def test_empty_harmful_set_is_config_error():
    m = tiny_model(V)
    m.heads["T"].harmful = ()
    with pytest.raises(ConfigError):
        harm_score(m, [3], "T")
    with pytest.raises(ConfigError):
        add_head(m, "U", 2, (), 0)


def test_init_deterministic_and_xavier_bounds():
    cfg = EncoderConfig(vocab_size=V)
    a, b = init_params(cfg, 5), init_params(cfg, 5)
    for (na, ta), (nb, tb) in zip(a.named_tensors(), b.named_tensors()):
        assert na == nb and ta.data.tobytes() == tb.data.tobytes()
    bound = np.sqrt(6 / (V + cfg.embed_dim))
    assert np.abs(a.encoder["embedding"].data).max() <= bound
    assert not a.encoder["b1"].data.any() and not a.encoder["b2"].data.any()


def test_reinit_head_isolation_and_seed_dependence():
    m = tiny_model(V)
    add_head(m, "U", 3, (2,), 7)
    before = {n: t.data.tobytes() for n, t in m.named_tensors()}
    reinit_head(m, "T", 99)
    after = {n: t.data.tobytes() for n, t in m.named_tensors()}
    changed = {n for n in before if before[n] != after[n]}
    assert changed == {"head.T.weight"}  # bias is re-zeroed, so stays equal
    other = tiny_model(V)
    reinit_head(other, "T", 100)
    assert other.heads["T"].weight.data.tobytes() != m.heads["T"].weight.data.tobytes()
    with pytest.raises(UsageError):
        reinit_head(m, "missing", 1)


def test_adversary_heads_are_binary_and_reversed():
    m = tiny_model(V)
    add_adv_head(m, "T/1", 3)
    assert m.adv_heads["T/1"].n_classes == 2
    z = encode_batch(m, [[3, 4]])
    lg = adversary_logits(m, z, "T/1", 1.0)
    np.testing.assert_array_equal(lg.data, z.data @ m.adv_heads["T/1"].weight.data + m.adv_heads["T/1"].bias.data)
    with pytest.raises(UsageError):
        adversary_logits(m, z, "T/9", 1.0)


def test_predict_batch_matches_harm_score_and_handles_empty():
    m = tiny_model(V)
    seqs = [[3, 4], [], [9, 9, 9]]
    scores, pred = predict_batch(m, seqs, "T", batch_size=2)
    assert scores[0] == pytest.approx(harm_score(m, [3, 4], "T"), abs=1e-14)
    assert scores[1] == pytest.approx(harm_score(m, [1], "T"), abs=1e-14)
    assert pred.shape == (3,)


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(vocab_size=0)
    with pytest.raises(ConfigError):
        EncoderConfig(vocab_size=5, encoder_kind="lstm")
