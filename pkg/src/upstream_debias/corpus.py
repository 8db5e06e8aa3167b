"""Synthetic biased corpora, JSONL ingestion/export and lexicon extraction.

The synthetic vocabulary is closed and partitioned into neutral tokens,
harm-signal tokens, identifier lexicons and dialect markers. Bias is injected by
making identifiers (or dialect-shifted text) more frequent among harmful
examples than among the others in the train and validation splits; the test
split uses the midpoint rate so the correlation carries no signal there.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, SchemaError, UsageError

logger = logging.getLogger(__name__)

PAD_ID, UNK_ID = 0, 1
PAD, UNK = "<pad>", "<unk>"

NEUTRAL, HARM, DIALECT = "neutral", "harm", "dialect"


class LexiconWarning(UserWarning):
    pass


@dataclass
class Vocab:
    """Token/id map with reserved ids 0 (PAD) and 1 (UNK).

    ``partition`` maps every non-reserved id to ``"neutral"``, ``"harm"``,
    ``"dialect"`` or ``"identifier:<j>"``.
    """

    tokens: list[str]
    partition: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.tokens[:2] != [PAD, UNK]:
            raise ConfigError("vocabulary must start with the PAD and UNK tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigError("duplicate tokens in vocabulary")
        if PAD_ID in self.partition or UNK_ID in self.partition:
            raise ConfigError("reserved tokens cannot belong to a partition")

    def __len__(self) -> int:
        return len(self.tokens)

    def ids(self, part: str) -> list[int]:
        return [i for i, p in sorted(self.partition.items()) if p == part]

    def lexicon(self, j: int) -> frozenset[int]:
        return frozenset(self.ids(f"identifier:{j}"))

    @property
    def n_lexicons(self) -> int:
        return len({p for p in self.partition.values() if p.startswith("identifier:")})

    @property
    def content_ids(self) -> list[int]:
        return list(range(2, len(self.tokens)))

    def encode(self, text: str) -> list[int]:
        return [self.index.get(t, UNK_ID) for t in text.split()]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def to_dict(self) -> dict:
        return {"tokens": self.tokens, "partition": {str(k): v for k, v in sorted(self.partition.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(list(d["tokens"]), {int(k): v for k, v in d.get("partition", {}).items()})

    @classmethod
    def from_texts(cls, texts: Iterable[str], min_count: int = 1) -> "Vocab":
        counts: dict[str, int] = {}
        for text in texts:
            for tok in text.split():
                counts[tok] = counts.get(tok, 0) + 1
        kept = sorted(t for t, c in counts.items() if c >= min_count and t not in (PAD, UNK))
        return cls([PAD, UNK] + kept)


def build_vocab(
    n_neutral: int = 300,
    n_harm: int = 40,
    lexicon_sizes: Sequence[int] = (10, 10),
    n_dialect: int = 40,
) -> Vocab:
    tokens = [PAD, UNK]
    partition: dict[int, str] = {}

    def extend(names, part):
        for name in names:
            partition[len(tokens)] = part
            tokens.append(name)

    extend((f"w{i:03d}" for i in range(n_neutral)), NEUTRAL)
    extend((f"h{i:02d}" for i in range(n_harm)), HARM)
    for j, size in enumerate(lexicon_sizes):
        extend((f"id{j}_{i:02d}" for i in range(size)), f"identifier:{j}")
    extend((f"d{i:02d}" for i in range(n_dialect)), DIALECT)
    return Vocab(tokens, partition)


@dataclass(frozen=True)
class Example:
    token_ids: tuple[int, ...]
    label: int
    attributes: tuple[int, ...] = ()
    uid: str = ""


@dataclass(frozen=True)
class BiasFactorSpec:
    """One bias factor: column ``index`` of the attribute vector.

    Lexical factors carry the lexicon (token ids) whose presence defines the
    attribute; attribute factors read the annotated column only.
    """

    index: int
    kind: str = "lexical"
    lexicon: frozenset[int] = frozenset()
    mitigation: str = "none"

    def __post_init__(self):
        if self.kind not in ("lexical", "attribute"):
            raise ConfigError(f"unknown factor kind {self.kind!r}")
        if self.mitigation not in ("expl_reg", "adversarial", "none"):
            raise ConfigError(f"unknown mitigation {self.mitigation!r}")
        if self.kind == "lexical" and not self.lexicon:
            raise ConfigError(f"lexical factor {self.index} needs a non-empty lexicon")
        if self.mitigation == "expl_reg" and self.kind != "lexical":
            raise ConfigError("explanation regularization requires a lexical factor")

    def with_mitigation(self, mitigation: str) -> "BiasFactorSpec":
        return BiasFactorSpec(self.index, self.kind, self.lexicon, mitigation)


@dataclass
class TaskSpec:
    task_id: str
    train: list[Example]
    val: list[Example]
    test: list[Example]
    n_classes: int = 2
    harmful: tuple[int, ...] = (1,)
    factors: tuple[BiasFactorSpec, ...] = ()

    def __post_init__(self):
        h = tuple(sorted(set(self.harmful)))
        if not h or h[0] < 0 or h[-1] >= self.n_classes or len(h) == self.n_classes:
            raise ConfigError(f"task {self.task_id}: harmful set {self.harmful} must be a non-empty proper subset")
        self.harmful = h

    def is_harmful(self, label: int) -> bool:
        return label in self.harmful

    def binary_labels(self, examples: Sequence[Example]) -> np.ndarray:
        return np.array([int(e.label in self.harmful) for e in examples], dtype=np.int64)

    def with_mitigations(self, mapping: dict[int, str]) -> "TaskSpec":
        """Copy with factor ``index -> mitigation`` applied; unnamed factors get ``none``."""
        factors = tuple(f.with_mitigation(mapping.get(f.index, "none")) for f in self.factors)
        return TaskSpec(self.task_id, self.train, self.val, self.test, self.n_classes, self.harmful, factors)


# --- synthetic generation ---------------------------------------------------


@dataclass(frozen=True)
class FactorInjection:
    """How one attribute column is generated.

    ``kind="identifier"`` places one token of lexicon ``lexicon``;
    ``kind="dialect"`` draws the example's filler tokens from the dialect-shifted
    distribution. Either happens with probability ``p_pos`` for harmful examples
    and ``p_neg`` otherwise.
    """

    kind: str = "identifier"
    p_pos: float = 0.8
    p_neg: float = 0.1
    lexicon: int = 0

    def __post_init__(self):
        if self.kind not in ("identifier", "dialect"):
            raise ConfigError(f"unknown injection kind {self.kind!r}")
        if not 0.0 <= self.p_neg <= self.p_pos <= 1.0:
            raise ConfigError("injection rates must satisfy 0 <= p_neg <= p_pos <= 1")


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 2
    harmful: tuple[int, ...] = (1,)
    n_train: int = 1400
    n_val: int = 300
    n_test: int = 300
    length: tuple[int, int] = (5, 20)
    factors: tuple[FactorInjection, ...] = (FactorInjection(),)
    dialect_shift: float = 0.5
    class_probs: Optional[tuple[float, ...]] = None
    signal_tokens: Optional[tuple[int, ...]] = None  # positions within the harm partition
    neg_signal_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.length
        if lo < 1 or hi < lo:
            raise ConfigError("length range must satisfy 1 <= L_min <= L_max")
        if not 0.0 <= self.dialect_shift <= 1.0:
            raise ConfigError("dialect_shift must lie in [0, 1]")
        if self.class_probs is not None:
            if len(self.class_probs) != self.n_classes or abs(sum(self.class_probs) - 1.0) > 1e-9:
                raise ConfigError("class_probs must have one entry per class and sum to 1")
        if not 0.0 <= self.neg_signal_rate <= 1.0:
            raise ConfigError("neg_signal_rate must lie in [0, 1]")

    @property
    def test_factors(self) -> tuple[FactorInjection, ...]:
        out = []
        for f in self.factors:
            mid = 0.5 * (f.p_pos + f.p_neg)
            out.append(FactorInjection(f.kind, mid, mid, f.lexicon))
        return tuple(out)


def _class_signal_sets(vocab: Vocab, cfg: SynthConfig) -> dict[int, list[int]]:
    harm_ids = vocab.ids(HARM)
    positions = cfg.signal_tokens if cfg.signal_tokens is not None else range(len(harm_ids))
    try:
        pool = [harm_ids[p] for p in positions]
    except IndexError:
        raise ConfigError("signal_tokens index beyond the harm-signal partition") from None
    signal_classes = list(range(1, cfg.n_classes))
    if len(pool) < len(signal_classes):
        raise ConfigError("harm-signal partition too small for the requested classes")
    chunks = np.array_split(np.asarray(pool), len(signal_classes))
    return {c: [int(t) for t in chunk] for c, chunk in zip(signal_classes, chunks)}


def _check_partitions(vocab: Vocab, cfg: SynthConfig) -> None:
    if not vocab.ids(NEUTRAL):
        raise ConfigError("vocabulary has no neutral tokens")
    lexicons_used = []
    for f in cfg.factors:
        if f.kind == "identifier":
            if not vocab.lexicon(f.lexicon):
                raise ConfigError(f"vocabulary has no identifier lexicon {f.lexicon}")
            lexicons_used.append(f.lexicon)
        elif not vocab.ids(DIALECT):
            raise ConfigError("vocabulary has no dialect markers")
    if len(set(lexicons_used)) != len(lexicons_used):
        raise ConfigError("each lexicon may back at most one factor")


def _filler(rng, n, neutral, dialect, shift):
    out = rng.choice(neutral, size=n)
    if shift > 0.0:
        use_dialect = rng.random(n) < shift
        out = np.where(use_dialect, rng.choice(dialect, size=n), out)
    return out


def _make_example(rng, vocab, cfg, factors, signal_sets, neutral, dialect, lexicons, uid) -> Example:
    probs = cfg.class_probs or tuple([1.0 / cfg.n_classes] * cfg.n_classes)
    label = int(rng.choice(cfg.n_classes, p=probs))
    harmful = label in cfg.harmful
    attrs = [int(rng.random() < (f.p_pos if harmful else f.p_neg)) for f in factors]
    is_dialect = any(a for a, f in zip(attrs, factors) if f.kind == "dialect")

    inserts: list[int] = []
    if label != 0:
        inserts.append(int(rng.choice(signal_sets[label])))
    elif cfg.neg_signal_rate > 0.0 and rng.random() < cfg.neg_signal_rate:
        all_signal = [t for ts in signal_sets.values() for t in ts]
        inserts.append(int(rng.choice(all_signal)))
    for a, f in zip(attrs, factors):
        if a and f.kind == "identifier":
            inserts.append(int(rng.choice(lexicons[f.lexicon])))

    length = int(rng.integers(cfg.length[0], cfg.length[1] + 1))
    length = max(length, len(inserts))
    tokens = _filler(rng, length, neutral, dialect, cfg.dialect_shift if is_dialect else 0.0)
    slots = rng.choice(length, size=len(inserts), replace=False)
    for s, t in zip(slots, inserts):
        tokens[s] = t
    return Example(tuple(int(t) for t in tokens), label, tuple(attrs), uid)


def generate_synthetic(vocab: Vocab, cfg: SynthConfig, name: str = "synth") -> dict[str, list[Example]]:
    """Generate ``{"train", "val", "test"}`` splits, deterministic in ``cfg.seed``."""
    _check_partitions(vocab, cfg)
    signal_sets = _class_signal_sets(vocab, cfg)
    neutral = np.asarray(vocab.ids(NEUTRAL))
    dialect = np.asarray(vocab.ids(DIALECT) or [UNK_ID])
    lexicons = {j: sorted(vocab.lexicon(j)) for j in range(vocab.n_lexicons)}
    rng = np.random.default_rng(cfg.seed)
    splits = {}
    for split, n, factors in (
        ("train", cfg.n_train, cfg.factors),
        ("val", cfg.n_val, cfg.factors),
        ("test", cfg.n_test, cfg.test_factors),
    ):
        splits[split] = [
            _make_example(rng, vocab, cfg, factors, signal_sets, neutral, dialect, lexicons, f"{name}/{split}/{i}")
            for i in range(n)
        ]
    return splits


@dataclass(frozen=True)
class Carrier:
    """A template sentence with one slot for an identifier."""

    tokens: tuple[int, ...]
    slot: int
    label: int


@dataclass
class TemplateSet:
    examples: list[Example]
    groups: list[int]  # identifier token id of each example


def make_carriers(
    vocab: Vocab,
    signal_ids: Sequence[int],
    n_nonhate: int = 5,
    n_hate: int = 5,
    length: tuple[int, int] = (4, 10),
    seed: int = 0,
) -> list[Carrier]:
    """Random carrier sentences: neutral fillers, plus one signal token for hate carriers."""
    rng = np.random.default_rng(seed)
    neutral = np.asarray(vocab.ids(NEUTRAL))
    out = []
    for label, n in ((0, n_nonhate), (1, n_hate)):
        for _ in range(n):
            L = int(rng.integers(length[0], length[1] + 1))
            toks = [int(t) for t in rng.choice(neutral, size=L)]
            if label:
                toks[int(rng.integers(L))] = int(rng.choice(np.asarray(signal_ids)))
            out.append(Carrier(tuple(toks), int(rng.integers(L + 1)), label))
    return out


def generate_templates(
    identifiers: Sequence[int],
    carriers: Sequence[Carrier],
    lexicons: Sequence[frozenset[int]] = (),
) -> TemplateSet:
    """Cross product ``identifiers x carriers``; label follows the carrier."""
    if not identifiers:
        raise ConfigError("templates need at least one identifier")
    if not any(c.label == 0 for c in carriers) or not any(c.label != 0 for c in carriers):
        raise ConfigError("templates need at least one non-hate and one hate carrier")
    examples, groups = [], []
    for ident in identifiers:
        attrs = tuple(int(ident in lex) for lex in lexicons)
        for k, c in enumerate(carriers):
            toks = c.tokens[: c.slot] + (int(ident),) + c.tokens[c.slot :]
            examples.append(Example(toks, c.label, attrs, f"template/{ident}/{k}"))
            groups.append(int(ident))
    return TemplateSet(examples, groups)


@dataclass(frozen=True)
class ExternalConfig:
    variant: str = "identifier"  # or "dialect"
    n: int = 500
    length: tuple[int, int] = (5, 20)
    dialect_shift: float = 0.5
    lexicon: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ("identifier", "dialect"):
            raise ConfigError(f"unknown external corpus variant {self.variant!r}")
        if self.n < 0:
            raise ConfigError("external corpus size must be non-negative")


def generate_external_negative(vocab: Vocab, cfg: ExternalConfig) -> list[Example]:
    """All-negative corpus: one identifier per sentence, or dialect-shifted text."""
    rng = np.random.default_rng(cfg.seed)
    neutral = np.asarray(vocab.ids(NEUTRAL))
    dialect = np.asarray(vocab.ids(DIALECT))
    out = []
    if cfg.variant == "identifier":
        lex = sorted(vocab.lexicon(cfg.lexicon))
        if not lex:
            raise ConfigError(f"vocabulary has no identifier lexicon {cfg.lexicon}")
        for i in range(cfg.n):
            L = int(rng.integers(cfg.length[0], cfg.length[1] + 1))
            toks = rng.choice(neutral, size=L)
            toks[int(rng.integers(L))] = int(rng.choice(lex))
            out.append(Example(tuple(int(t) for t in toks), 0, (1,), f"external-identifier/{i}"))
    else:
        if dialect.size == 0:
            raise ConfigError("vocabulary has no dialect markers")
        for i in range(cfg.n):
            L = int(rng.integers(cfg.length[0], cfg.length[1] + 1))
            toks = _filler(rng, L, neutral, dialect, cfg.dialect_shift)
            out.append(Example(tuple(int(t) for t in toks), 0, (1,), f"external-dialect/{i}"))
    return out


# --- JSONL ----------------------------------------------------------------------


def lexical_attributes(token_ids: Sequence[int], lexicons: Sequence[frozenset[int]]) -> tuple[int, ...]:
    present = set(token_ids)
    return tuple(int(bool(present & lex)) for lex in lexicons)


def ingest_jsonl(
    path: Union[str, Path],
    vocab: Vocab,
    label_field: str = "label",
    attr_fields: Sequence[str] = (),
    lexicons: Optional[Sequence[frozenset[int]]] = None,
    text_field: str = "text",
) -> list[Example]:
    """Read one JSON record per line; unknown tokens map to UNK.

    Attributes come from ``attr_fields`` (scalar or list-valued fields, in
    order) or, when ``lexicons`` is given, from lexicon-token presence.
    """
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DataError(f"{path}:{lineno}: record is not an object")
            for name in (text_field, label_field):
                if name not in rec:
                    raise SchemaError(f"{path}:{lineno}: missing field {name!r}")
            ids = tuple(vocab.encode(str(rec[text_field])))
            if lexicons is not None:
                attrs = lexical_attributes(ids, lexicons)
            else:
                attrs = []
                for name in attr_fields:
                    if name not in rec:
                        raise SchemaError(f"{path}:{lineno}: missing field {name!r}")
                    val = rec[name]
                    attrs.extend(int(v) for v in val) if isinstance(val, list) else attrs.append(int(val))
                attrs = tuple(attrs)
            out.append(Example(ids, int(rec[label_field]), attrs, str(rec.get("id", f"{Path(path).name}/{lineno}"))))
    return out


def write_jsonl(examples: Iterable[Example], vocab: Vocab, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for e in examples:
            rec = {"id": e.uid, "text": vocab.decode(e.token_ids), "label": e.label, "attributes": list(e.attributes)}
            fh.write(json.dumps(rec) + "\n")


# --- lexicon extraction -----------------------------------------------------------


def _fit_bow_logreg(X: np.ndarray, y: np.ndarray, weight_decay: float, steps: int, lr: float) -> np.ndarray:
    n, d = X.shape
    w = Tensor(np.zeros((d, 1)), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    opt = ad.Adam([w, b], lr=lr)
    Xt = Tensor(X)
    zeros = Tensor(np.zeros((n, 1)))
    for _ in range(steps):
        opt.zero_grad()
        logits = ad.concat([zeros, Xt @ w + b], axis=1)
        loss = ad.cross_entropy(logits, y) + ad.scale(ad.sq_norm(w), weight_decay)
        loss.backward()
        opt.step()
    return w.data[:, 0].copy()


def extract_lexicon(
    dataset: Sequence[Example],
    vocab: Vocab,
    k: int,
    harmful: Sequence[int] = (1,),
    attr_filter: Optional[tuple[int, float]] = None,
    weight_decay: float = 1e-4,
    steps: int = 500,
    lr: float = 0.1,
) -> list[int]:
    """Top-``k`` tokens by coefficient of a bag-of-words harmful-vs-rest classifier.

    With ``attr_filter=(j, tau)`` only tokens ``w`` with
    ``P(a_j = 1 | w present) >= tau`` are eligible.
    """
    if not dataset:
        raise UsageError("extract_lexicon: empty dataset")
    if k < 1:
        raise UsageError("extract_lexicon: k must be >= 1")
    cand = vocab.content_ids
    col = {t: i for i, t in enumerate(cand)}
    X = np.zeros((len(dataset), len(cand)))
    for r, e in enumerate(dataset):
        for t in set(e.token_ids):
            if t in col:
                X[r, col[t]] = 1.0
    harmful = set(harmful)
    y = np.array([int(e.label in harmful) for e in dataset])
    coef = _fit_bow_logreg(X, y, weight_decay, steps, lr)

    eligible = np.ones(len(cand), dtype=bool)
    if attr_filter is not None:
        j, tau = attr_filter
        a = np.array([e.attributes[j] for e in dataset], dtype=float)
        present = X.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            cond = (X * a[:, None]).sum(axis=0) / present
        eligible = (present > 0) & (cond >= tau)
    order = sorted(np.flatnonzero(eligible), key=lambda i: (-coef[i], cand[i]))
    if len(order) < k:
        warnings.warn(f"only {len(order)} eligible tokens for k={k}", LexiconWarning, stacklevel=2)
    return [cand[i] for i in order[:k]]
