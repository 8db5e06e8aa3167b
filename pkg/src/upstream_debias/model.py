"""Text classifier ``f = h . g``: a small encoder, task heads and adversarial heads."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, UsageError

UNK_ID = 1

ENCODER_KINDS = ("mean-pool-mlp", "single-head-attention")


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    embed_dim: int = 32
    hidden_dim: int = 64
    repr_dim: int = 32
    encoder_kind: str = "mean-pool-mlp"

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "hidden_dim", "repr_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.encoder_kind not in ENCODER_KINDS:
            raise ConfigError(f"unknown encoder_kind {self.encoder_kind!r}")


@dataclass
class Head:
    """Affine classifier ``z -> z @ weight + bias``."""

    weight: Tensor
    bias: Tensor
    harmful: tuple[int, ...] = ()

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]


@dataclass
class ModelParams:
    config: EncoderConfig
    encoder: dict[str, Tensor]
    heads: dict[str, Head] = field(default_factory=dict)
    adv_heads: dict[str, Head] = field(default_factory=dict)

    def encoder_tensors(self) -> list[Tensor]:
        return [self.encoder[k] for k in sorted(self.encoder)]

    def head_tensors(self, task_id: Optional[str] = None) -> list[Tensor]:
        ids = sorted(self.heads) if task_id is None else [task_id]
        return [t for tid in ids for t in (self.heads[tid].weight, self.heads[tid].bias)]

    def adv_tensors(self) -> list[Tensor]:
        return [t for j in sorted(self.adv_heads) for t in (self.adv_heads[j].weight, self.adv_heads[j].bias)]

    def all_tensors(self) -> list[Tensor]:
        return self.encoder_tensors() + self.head_tensors() + self.adv_tensors()

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for k in sorted(self.encoder):
            yield f"encoder.{k}", self.encoder[k]
        for tid in sorted(self.heads):
            yield f"head.{tid}.weight", self.heads[tid].weight
            yield f"head.{tid}.bias", self.heads[tid].bias
        for j in sorted(self.adv_heads):
            yield f"adv.{j}.weight", self.adv_heads[j].weight
            yield f"adv.{j}.bias", self.adv_heads[j].bias

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def head(self, task_id: str) -> Head:
        try:
            return self.heads[task_id]
        except KeyError:
            raise UsageError(f"unknown task id {task_id!r}") from None


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


def init_params(config: EncoderConfig, seed: int) -> ModelParams:
    """Xavier-uniform encoder weights and zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    E, H, R = config.embed_dim, config.hidden_dim, config.repr_dim
    enc = {
        "embedding": _param(_xavier(rng, config.vocab_size, E)),
        "w1": _param(_xavier(rng, E, H)),
        "b1": _param(np.zeros(H)),
        "w2": _param(_xavier(rng, H, R)),
        "b2": _param(np.zeros(R)),
    }
    if config.encoder_kind == "single-head-attention":
        for name in ("wq", "wk", "wv"):
            enc[name] = _param(_xavier(rng, E, E))
    return ModelParams(config=config, encoder=enc)


def _new_head(repr_dim: int, n_classes: int, harmful: Sequence[int], seed: int) -> Head:
    rng = np.random.default_rng(seed)
    return Head(_param(_xavier(rng, repr_dim, n_classes)), _param(np.zeros(n_classes)), tuple(harmful))


def add_head(params: ModelParams, task_id: str, n_classes: int, harmful: Sequence[int], seed: int) -> None:
    if n_classes < 2:
        raise ConfigError("a head needs at least two classes")
    harmful = tuple(sorted(set(harmful)))
    if not harmful or harmful[0] < 0 or harmful[-1] >= n_classes:
        raise ConfigError(f"harmful set {harmful} invalid for {n_classes} classes")
    params.heads[task_id] = _new_head(params.config.repr_dim, n_classes, harmful, seed)


def add_adv_head(params: ModelParams, key: str, seed: int) -> None:
    params.adv_heads[key] = _new_head(params.config.repr_dim, 2, (1,), seed)


def reinit_head(params: ModelParams, task_id: str, seed: int) -> None:
    old = params.head(task_id)
    params.heads[task_id] = _new_head(params.config.repr_dim, old.n_classes, old.harmful, seed)


# --- forward ------------------------------------------------------------------


def _validate(params: ModelParams, seq: Sequence[int]) -> None:
    if len(seq) == 0:
        raise UsageError("encode: empty token sequence")
    if min(seq) < 0 or max(seq) >= params.config.vocab_size:
        raise DataError(f"encode: token id outside [0, {params.config.vocab_size})")


def _mlp(params: ModelParams, pooled: Tensor) -> Tensor:
    enc = params.encoder
    hidden = ad.tanh(pooled @ enc["w1"] + enc["b1"])
    return hidden @ enc["w2"] + enc["b2"]


def _attention_pool(params: ModelParams, seq: Sequence[int]) -> Tensor:
    enc = params.encoder
    x = ad.take_rows(enc["embedding"], seq)
    q, k, v = x @ enc["wq"], x @ enc["wk"], x @ enc["wv"]
    att = ad.softmax(ad.scale(q @ ad.transpose(k), 1.0 / np.sqrt(params.config.embed_dim)))
    return ad.reshape(ad.mean(att @ v, axis=0), (1, params.config.embed_dim))


def encode_batch(
    params: ModelParams,
    seqs: Sequence[Sequence[int]],
    drop: Sequence[tuple[int, int]] = (),
) -> Tensor:
    """Encode ``seqs`` into a ``(len(seqs) + len(drop), repr_dim)`` matrix.

    Each ``(row, token)`` pair in ``drop`` appends one extra row: sequence
    ``seqs[row]`` with every occurrence of ``token`` removed. A sequence that
    becomes empty is replaced by the single UNK token.
    """
    for s in seqs:
        _validate(params, s)
    if params.config.encoder_kind == "single-head-attention":
        variants = [list(s) for s in seqs]
        for row, tok in drop:
            kept = [t for t in seqs[row] if t != tok]
            variants.append(kept or [UNK_ID])
        pooled = ad.concat([_attention_pool(params, s) for s in variants], axis=0)
        return _mlp(params, pooled)

    # Mean pooling as one matmul over the distinct tokens of the batch, weighted
    # by count / length: depends only on the token multiset, so it is exactly
    # order-invariant.
    counted = []
    for s in seqs:
        ids, counts = np.unique(np.asarray(s), return_counts=True)
        counted.append((ids, counts))
    for row, tok in drop:
        ids, counts = counted[row]
        keep = ids != tok
        counted.append((ids[keep], counts[keep]) if keep.any() else (np.array([UNK_ID]), np.array([1])))
    vocab_ids = np.unique(np.concatenate([ids for ids, _ in counted]))
    pool = np.zeros((len(counted), vocab_ids.size))
    for r, (ids, counts) in enumerate(counted):
        pool[r, np.searchsorted(vocab_ids, ids)] = counts / counts.sum()
    gathered = ad.take_rows(params.encoder["embedding"], vocab_ids)
    return _mlp(params, Tensor(pool) @ gathered)


def encode(params: ModelParams, token_ids: Sequence[int]) -> Tensor:
    """Representation ``z`` of one sequence, shape ``(repr_dim,)``."""
    z = encode_batch(params, [token_ids])
    return ad.reshape(z, (params.config.repr_dim,))


def classify(params: ModelParams, z: Tensor, task_id: str) -> Tensor:
    head = params.head(task_id)
    if z.data.ndim == 1:
        z = ad.reshape(z, (1, z.shape[0]))
        return ad.reshape(z @ head.weight + head.bias, (head.n_classes,))
    return z @ head.weight + head.bias


def adversary_logits(params: ModelParams, z: Tensor, key: str, lam: float) -> Tensor:
    """Adversarial head ``key`` applied to ``z`` behind a gradient-reversal layer."""
    try:
        head = params.adv_heads[key]
    except KeyError:
        raise UsageError(f"no adversarial head {key!r}") from None
    return ad.grad_reverse(z, lam) @ head.weight + head.bias


def _harm_indicator(head: Head) -> np.ndarray:
    if not head.harmful:
        raise ConfigError("task declares no harmful labels")
    ind = np.zeros((head.n_classes, 1))
    ind[list(head.harmful), 0] = 1.0
    return ind


def harm_from_logits(logits: Tensor, head: Head) -> Tensor:
    """Summed softmax probability of the harmful classes, shape ``(n,)``."""
    p = ad.softmax(logits) @ Tensor(_harm_indicator(head))
    return ad.reshape(p, (logits.shape[0],))


def harm_logit_from_logits(logits: Tensor, head: Head) -> Tensor:
    """``log p_harm - log p_not_harm`` per row."""
    ind = _harm_indicator(head)
    p = ad.softmax(logits)
    pos = ad.log(p @ Tensor(ind))
    neg = ad.log(p @ Tensor(1.0 - ind))
    return ad.reshape(pos - neg, (logits.shape[0],))


def harm_score(params: ModelParams, token_ids: Sequence[int], task_id: str) -> float:
    head = params.head(task_id)
    logits = classify(params, encode_batch(params, [token_ids]), task_id)
    return float(harm_from_logits(logits, head).data[0])


def predict_batch(
    params: ModelParams, seqs: Sequence[Sequence[int]], task_id: str, batch_size: int = 512
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(harm scores, argmax labels)`` for many sequences without tracking grads."""
    head = params.head(task_id)
    seqs = [s if len(s) else [UNK_ID] for s in seqs]
    harm, pred = [], []
    for i in range(0, len(seqs), batch_size):
        logits = classify(params, encode_batch(params, seqs[i : i + batch_size]), task_id)
        harm.append(harm_from_logits(logits, head).data)
        pred.append(logits.data.argmax(axis=1))
    if not harm:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    return np.concatenate(harm), np.concatenate(pred)
