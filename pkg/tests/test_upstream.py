import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from upstream_debias import autodiff as ad
from upstream_debias.corpus import BiasFactorSpec, Example, FactorInjection, SynthConfig, TaskSpec, generate_synthetic
from upstream_debias.errors import ConfigError, DataError, UsageError
from upstream_debias.metrics import attribute_probe_accuracy, importance_gradient_probe
from upstream_debias.model import EncoderConfig, add_adv_head, classify, encode_batch, harm_score, predict_batch
from upstream_debias.upstream import (
    UpstreamConfig,
    adv_key,
    adv_loss,
    expl_reg_loss,
    occlusion_importance,
    train_upstream,
)

from conftest import biased_task, central_diff, random_seqs, tiny_model

V = 30
LEX = frozenset({20, 21, 22, 23})
FACTOR = BiasFactorSpec(0, "lexical", LEX)


def _batch(rng, n=6):
    return [Example(tuple(int(t) for t in s), int(rng.integers(0, 2)), (int(rng.integers(0, 2)),)) for s in random_seqs(rng, V, n)]


def _ce(m, batch):
    logits = classify(m, encode_batch(m, [e.token_ids for e in batch]), "T")
    return ad.cross_entropy(logits, [e.label for e in batch]).item()


def _phi_oracle(m, seq, w):
    rest = [t for t in seq if t != w] or [1]
    return harm_score(m, seq, "T") - harm_score(m, rest, "T")


# --- occlusion ----------------------------------------------------------------------


def test_occlusion_matches_two_forward_passes():
    rng = np.random.default_rng(0)
    for k in range(50):
        m = tiny_model(V, seed=k)
        seq = [int(t) for t in rng.integers(2, V, size=int(rng.integers(1, 9)))]
        w = int(rng.choice(seq))
        assert abs(occlusion_importance(m, seq, w, "T").item() - _phi_oracle(m, seq, w)) <= 1e-12


def test_occlusion_removes_every_occurrence():
    m = tiny_model(V)
    seq = [5, 9, 5, 5, 7]
    phi = occlusion_importance(m, seq, 5, "T").item()
    assert phi == pytest.approx(harm_score(m, seq, "T") - harm_score(m, [9, 7], "T"), abs=1e-15)
    # Only occurrence gone: the UNK-only sequence stands in.
    assert occlusion_importance(m, [5, 5], 5, "T").item() == pytest.approx(_phi_oracle(m, [5, 5], 5), abs=1e-15)


def test_occlusion_constant_encoder_is_zero():
    m = tiny_model(V)
    m.encoder["w1"].data[:] = 0
    m.encoder["w2"].data[:] = 0
    assert occlusion_importance(m, [3, 4, 20], 20, "T").item() == 0.0


def test_occlusion_word_absent_is_usage_error():
    with pytest.raises(UsageError):
        occlusion_importance(tiny_model(V), [3, 4], 5, "T")


def test_occlusion_logit_scale_option():
    m = tiny_model(V)
    lg = lambda s: float(np.diff(classify(m, encode_batch(m, [s]), "T").data[0])[0])  # noqa: E731
    assert occlusion_importance(m, [3, 20], 20, "T", "logit").item() == pytest.approx(lg([3, 20]) - lg([3]), abs=1e-12)


# --- explanation regularization -----------------------------------------------------


@given(st.integers(0, 10_000), st.floats(0.01, 50))
def test_expl_reg_decomposition(seed, alpha):
    rng = np.random.default_rng(seed)
    m = tiny_model(V, seed=seed % 7)
    batch = _batch(rng)
    phis = [_phi_oracle(m, e.token_ids, w) for e in batch for w in sorted(set(e.token_ids) & LEX)]
    total = expl_reg_loss(m, batch, "T", [FACTOR], alpha).item()
    assert abs((total - _ce(m, batch)) - alpha * sum(p * p for p in phis) / len(batch)) <= 1e-12


def test_expl_reg_alpha_zero_and_no_words_are_plain_ce():
    rng = np.random.default_rng(1)
    m = tiny_model(V)
    batch = _batch(rng)
    assert expl_reg_loss(m, batch, "T", [FACTOR], 0.0).item() == _ce(m, batch)
    plain = [Example((3, 4), 1), Example((5,), 0)]
    assert expl_reg_loss(m, plain, "T", [FACTOR], 5.0).item() == _ce(m, plain)


def test_expl_reg_single_word_recomposition():
    m = tiny_model(V)
    e = Example((3, 20, 8), 1, (1,))
    phi = occlusion_importance(m, e.token_ids, 20, "T").item()
    diff = expl_reg_loss(m, [e], "T", [FACTOR], 0.7).item() - _ce(m, [e])
    assert abs(diff - 0.7 * phi**2) <= 1e-12


def test_expl_reg_per_type_not_per_occurrence():
    m = tiny_model(V)
    e = Example((20, 20, 20, 4), 1)
    phi = occlusion_importance(m, e.token_ids, 20, "T").item()
    assert abs(expl_reg_loss(m, [e], "T", [FACTOR], 1.0).item() - _ce(m, [e]) - phi**2) <= 1e-12


def test_expl_reg_gradient_matches_finite_differences():
    m = tiny_model(V)
    batch = [Example((3, 20, 8), 1), Example((21, 22, 5), 0)]
    expl_reg_loss(m, batch, "T", [FACTOR], 3.0).backward()
    rng = np.random.default_rng(2)
    for name, t in m.named_tensors():
        for _ in range(3):
            idx = tuple(int(rng.integers(s)) for s in t.shape)
            if name == "encoder.embedding":
                idx = (int(rng.choice([3, 20, 8, 21, 22, 5])), idx[1])
            fd = central_diff(lambda: expl_reg_loss(m, batch, "T", [FACTOR], 3.0).item(), t, idx)
            assert abs(t.grad[idx] - fd) <= 1e-4 * max(1e-3, abs(fd)), name


def test_expl_reg_rejects_attribute_factor():
    with pytest.raises(UsageError):
        expl_reg_loss(tiny_model(V), [Example((3,), 1, (1,))], "T", [BiasFactorSpec(0, "attribute")], 1.0)


# --- adversarial ---------------------------------------------------------------------


def _adv_model():
    m = tiny_model(V)
    add_adv_head(m, adv_key("T", 0), 11)
    return m


ADV = [BiasFactorSpec(0, "attribute", mitigation="adversarial")]


def test_adv_lambda_zero_gives_no_encoder_gradient():
    m = _adv_model()
    batch = _batch(np.random.default_rng(3))
    adv_loss(m, batch, "T", ADV, 0.0).backward()
    assert all(not np.any(t.grad) for t in m.encoder_tensors())
    assert np.any(m.adv_heads["T/0"].weight.grad)


def test_adv_head_learns_constant_attribute():
    m = _adv_model()
    rng = np.random.default_rng(4)
    batch = [Example(e.token_ids, e.label, (1,)) for e in _batch(rng, 16)]
    opt = ad.Adam(m.adv_tensors(), lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        loss = adv_loss(m, batch, "T", ADV, 1.0)
        loss.backward()
        opt.step()
    assert adv_loss(m, batch, "T", ADV, 1.0).item() < 0.01


@pytest.mark.parametrize("lam", [0.5, 1.0, 2.0])
def test_total_gradient_decomposes_with_reversal(lam):
    m = _adv_model()
    batch = _batch(np.random.default_rng(5))
    seqs = [e.token_ids for e in batch]
    attrs = [e.attributes[0] for e in batch]
    labels = [e.label for e in batch]

    def ce():
        return ad.cross_entropy(classify(m, encode_batch(m, seqs), "T"), labels).item()

    def adv_plain():
        z = encode_batch(m, seqs)
        h = m.adv_heads["T/0"]
        return ad.cross_entropy(z @ h.weight + h.bias, attrs).item()

    z = encode_batch(m, seqs)
    (ad.cross_entropy(classify(m, z, "T"), labels) + adv_loss(m, batch, "T", ADV, lam, z=z)).backward()
    rng = np.random.default_rng(6)
    for name, t in m.encoder.items():
        for _ in range(4):
            idx = tuple(int(rng.integers(s)) for s in t.shape)
            if name == "embedding":
                idx = (int(rng.choice([s for q in seqs for s in q])), idx[1])
            expected = central_diff(ce, t, idx) - lam * central_diff(adv_plain, t, idx)
            assert abs(t.grad[idx] - expected) <= 1e-4 * max(1e-3, abs(expected)), name


def test_adv_missing_attribute_is_data_error():
    m = _adv_model()
    with pytest.raises(DataError):
        adv_loss(m, [Example((3,), 1, ())], "T", ADV, 1.0)


# --- training -----------------------------------------------------------------------


def _task(vocab, name, signal, seed, factors=(), n_train=600):
    facs = tuple(factors)
    sp = generate_synthetic(vocab, SynthConfig(n_train=n_train, n_val=200, n_test=200, factors=facs, signal_tokens=signal, seed=seed), name)
    return sp


ENC = dict(embed_dim=16, hidden_dim=16, repr_dim=8)


def _encoder(vocab):
    return EncoderConfig(vocab_size=len(vocab), **ENC)


def test_vanilla_training_on_separable_data(small_vocab):
    sp = _task(small_vocab, "S", (0, 1, 2, 3), 1)
    task = TaskSpec("S", sp["train"], sp["val"], sp["test"])
    res = train_upstream([task], UpstreamConfig(alpha=0.0, lr=0.01, seed=1), _encoder(small_vocab))
    _, pred = predict_batch(res.params, [e.token_ids for e in task.val], "S")
    assert np.mean(pred == np.array([e.label for e in task.val])) > 0.95


def test_two_tasks_beat_majority(small_vocab):
    a = _task(small_vocab, "A", (0, 1, 2, 3), 2)
    b = _task(small_vocab, "B", (4, 5, 6, 7), 3)
    tasks = [TaskSpec(n, s["train"], s["val"], s["test"]) for n, s in (("A", a), ("B", b))]
    res = train_upstream(tasks, UpstreamConfig(lr=0.01, seed=2, epochs=5), _encoder(small_vocab))
    assert set(res.params.heads) == {"A", "B"}
    for t in tasks:
        labels = np.array([e.label for e in t.val])
        majority = max(np.mean(labels), 1 - np.mean(labels))
        _, pred = predict_batch(res.params, [e.token_ids for e in t.val], t.task_id)
        assert np.mean(pred == labels) > majority


def test_training_is_byte_deterministic(small_vocab):
    task = biased_task(small_vocab, n_train=200, signal=(0, 1, 2, 3)).with_mitigations({0: "expl_reg", 1: "adversarial"})
    cfg = UpstreamConfig(alpha=1.0, lr=0.01, seed=5, epochs=2, adv_steps=2, adv_pool=64)

    def run():
        res = train_upstream([task], cfg, _encoder(small_vocab))
        return b"".join(t.data.tobytes() for _, t in res.params.named_tensors()), res.step, res.history

    assert run() == run()


def test_expl_reg_lowers_mean_importance(vocab):
    task = biased_task(vocab, n_train=800, seed=7)
    enc = EncoderConfig(vocab_size=len(vocab), **ENC)
    out = {}
    for alpha in (0.0, 10.0):
        t = task.with_mitigations({0: "expl_reg"} if alpha else {})
        res = train_upstream([t], UpstreamConfig(alpha=alpha, lr=0.003, seed=7), enc)
        out[alpha] = importance_gradient_probe(res.params, task.val, [vocab.lexicon(0)], "A")[0]
    assert out[10.0] < out[0.0]


def test_upstream_config_validation():
    with pytest.raises(ConfigError):
        UpstreamConfig(alpha=-1)
    with pytest.raises(ConfigError):
        UpstreamConfig(lam=-0.5)
    with pytest.raises(ConfigError):
        UpstreamConfig(phi_scale="odds")
    with pytest.raises(UsageError):
        train_upstream([], UpstreamConfig(), EncoderConfig(vocab_size=10))


def test_expl_reg_on_attribute_factor_rejected_at_spec_level():
    with pytest.raises(ConfigError):
        BiasFactorSpec(1, "attribute", mitigation="expl_reg")


PROBE_SEEDS = range(5)


def _dialect_task(vocab, seed):
    facs = (FactorInjection("dialect", 0.8, 0.1),)
    sp = generate_synthetic(vocab, SynthConfig(factors=facs, signal_tokens=tuple(range(20)), seed=100 * seed + 1, dialect_shift=0.2), "A")
    return TaskSpec("A", sp["train"], sp["val"], sp["test"], 2, (1,), (BiasFactorSpec(0, "attribute"),))


@pytest.mark.slow
def test_adversarial_training_lowers_probe_accuracy(vocab):
    """A fresh linear probe on frozen representations decodes dialect less well
    after adversarial training than after vanilla training (mean over seeds)."""
    enc = EncoderConfig(vocab_size=len(vocab))
    acc = {"vanilla": [], "adversarial": []}
    for seed in PROBE_SEEDS:
        task = _dialect_task(vocab, seed)
        for name, mit in (("vanilla", {}), ("adversarial", {0: "adversarial"})):
            cfg = UpstreamConfig(seed=seed, lr=3e-3, adv_lr_mult=10.0, adv_steps=10, adv_pool=512, patience=None)
            res = train_upstream([task.with_mitigations(mit)], cfg, enc)
            acc[name].append(attribute_probe_accuracy(res.params, task.train, task.val, 0, seed=seed))
    assert np.mean(acc["adversarial"]) < np.mean(acc["vanilla"]), acc
