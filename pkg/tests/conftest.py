import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from upstream_debias.corpus import BiasFactorSpec, FactorInjection, SynthConfig, TaskSpec, build_vocab, generate_synthetic
from upstream_debias.model import EncoderConfig, add_head, init_params

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def central_diff(f, tensor, index, h=1e-5):
    """Central finite difference of scalar ``f()`` w.r.t. ``tensor.data[index]``."""
    old = tensor.data[index]
    tensor.data[index] = old + h
    up = f()
    tensor.data[index] = old - h
    down = f()
    tensor.data[index] = old
    return (up - down) / (2 * h)


def rel_err(a, b):
    return abs(a - b) / max(1e-8, abs(b))


@pytest.fixture(scope="session")
def vocab():
    return build_vocab()


@pytest.fixture(scope="session")
def small_vocab():
    return build_vocab(n_neutral=30, n_harm=8, lexicon_sizes=(4, 4), n_dialect=6)


def tiny_model(vocab_size, seed=0, n_classes=2, harmful=(1,), task_id="T", **dims):
    cfg = EncoderConfig(vocab_size=vocab_size, **{"embed_dim": 6, "hidden_dim": 7, "repr_dim": 5, **dims})
    params = init_params(cfg, seed)
    add_head(params, task_id, n_classes, harmful, seed + 1000)
    return params


@pytest.fixture
def model(small_vocab):
    return tiny_model(len(small_vocab))


def biased_task(vocab, name="A", seed=1, n_train=600, signal=tuple(range(20)), shift=0.2, p_pos=0.8, p_neg=0.1):
    facs = (FactorInjection("identifier", p_pos, p_neg, 0), FactorInjection("dialect", p_pos, p_neg))
    sp = generate_synthetic(
        vocab, SynthConfig(n_train=n_train, n_val=200, n_test=200, factors=facs, signal_tokens=signal, seed=seed, dialect_shift=shift), name
    )
    factors = (BiasFactorSpec(0, "lexical", vocab.lexicon(0)), BiasFactorSpec(1, "attribute"))
    return TaskSpec(name, sp["train"], sp["val"], sp["test"], 2, (1,), factors)


def random_seqs(rng, vocab_size, n, lo=1, hi=8):
    return [list(rng.integers(2, vocab_size, size=int(rng.integers(lo, hi + 1)))) for _ in range(n)]


# Acceptance results, filled by tests/test_acceptance.py: criterion -> (passed, detail).
RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
