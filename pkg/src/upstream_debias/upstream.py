"""Upstream stage: multi-task training with explanation regularization and/or
adversarial de-biasing of the shared encoder."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BiasFactorSpec, Example, TaskSpec
from .errors import ConfigError, DataError, NumericError, UsageError
from .model import (
    EncoderConfig,
    ModelParams,
    adversary_logits,
    add_adv_head,
    add_head,
    classify,
    encode_batch,
    harm_from_logits,
    harm_logit_from_logits,
    init_params,
)
from .training import EarlyStopping, TrainResult, derive_seed, shuffled_batches, validation_metric

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class UpstreamConfig:
    alpha: float = 0.03
    lam: float = 1.0
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    patience: Optional[int] = 3
    seed: int = 0
    phi_scale: str = "prob"
    adv_lr_mult: float = 1.0
    adv_steps: int = 0
    adv_pool: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.lam < 0:
            raise ConfigError("alpha and lambda must be non-negative")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.adv_lr_mult <= 0 or self.adv_steps < 0 or self.adv_pool < 0:
            raise ConfigError("adv_lr_mult must be positive; adv_steps and adv_pool non-negative")
        if self.phi_scale not in ("prob", "logit"):
            raise ConfigError(f"unknown phi_scale {self.phi_scale!r}")


def adv_key(task_id: str, factor: int) -> str:
    return f"{task_id}/{factor}"


def _scores(logits: Tensor, params: ModelParams, task_id: str, phi_scale: str) -> Tensor:
    head = params.head(task_id)
    if phi_scale == "logit":
        return harm_logit_from_logits(logits, head)
    return harm_from_logits(logits, head)


def occlusion_pairs(batch: Sequence[Example], factors: Sequence[BiasFactorSpec]) -> list[tuple[int, int]]:
    """``(row, token)`` for every example row and lexicon token type it contains."""
    pairs = []
    for i, e in enumerate(batch):
        present = set(e.token_ids)
        for f in factors:
            if f.kind != "lexical":
                raise UsageError(f"factor {f.index} is not lexical; explanation regularization needs a lexicon")
            pairs.extend((i, w) for w in sorted(present & f.lexicon))
    return pairs


def phi_from_scores(scores: Tensor, n_rows: int, pairs: Sequence[tuple[int, int]]) -> Tensor:
    """Occlusion importances given scores for ``n_rows`` originals followed by the occluded rows."""
    col = ad.reshape(scores, (scores.shape[0], 1))
    orig = ad.take_rows(col, [row for row, _ in pairs])
    occluded = ad.take_rows(col, range(n_rows, n_rows + len(pairs)))
    return orig - occluded


def occlusion_importance(
    params: ModelParams,
    token_ids: Sequence[int],
    word: int,
    task_id: str,
    phi_scale: str = "prob",
) -> Tensor:
    """Differentiable ``harm(x) - harm(x without every occurrence of word)``."""
    if word not in token_ids:
        raise UsageError(f"token {word} does not occur in the input")
    z = encode_batch(params, [token_ids], [(0, word)])
    scores = _scores(classify(params, z, task_id), params, task_id, phi_scale)
    return ad.reshape(phi_from_scores(scores, 1, [(0, word)]), ())


def _labels(batch: Sequence[Example]) -> np.ndarray:
    return np.array([e.label for e in batch], dtype=np.int64)


def _ce_and_reg(
    params: ModelParams,
    batch: Sequence[Example],
    task_id: str,
    reg_factors: Sequence[BiasFactorSpec],
    alpha: float,
    phi_scale: str,
) -> tuple[Tensor, Optional[Tensor], Tensor]:
    """Cross-entropy, the summed squared importances divided by batch size, and ``z``."""
    n = len(batch)
    pairs = occlusion_pairs(batch, reg_factors) if alpha > 0 else []
    z_all = encode_batch(params, [e.token_ids for e in batch], pairs)
    logits_all = classify(params, z_all, task_id)
    if not pairs:
        return ad.cross_entropy(logits_all, _labels(batch)), None, z_all
    rows = list(range(n))
    ce = ad.cross_entropy(ad.take_rows(logits_all, rows), _labels(batch))
    phi = phi_from_scores(_scores(logits_all, params, task_id, phi_scale), n, pairs)
    reg = ad.scale(ad.sq_norm(phi), alpha / n)
    return ce, reg, ad.take_rows(z_all, rows)


def expl_reg_loss(
    params: ModelParams,
    batch: Sequence[Example],
    task_id: str,
    factors: Sequence[BiasFactorSpec],
    alpha: float,
    phi_scale: str = "prob",
) -> Tensor:
    """Mean cross-entropy plus ``alpha * sum(phi^2) / batch_size`` over lexicon tokens present."""
    for f in factors:
        if f.kind != "lexical":
            raise UsageError(f"factor {f.index} is not lexical; explanation regularization needs a lexicon")
    ce, reg, _ = _ce_and_reg(params, batch, task_id, factors, alpha, phi_scale)
    return ce if reg is None else ce + reg


def adv_loss(
    params: ModelParams,
    batch: Sequence[Example],
    task_id: str,
    factors: Sequence[BiasFactorSpec],
    lam: float,
    z: Optional[Tensor] = None,
) -> Tensor:
    """Sum over factors of the adversary's mean cross-entropy, seen through gradient reversal."""
    if z is None:
        z = encode_batch(params, [e.token_ids for e in batch])
    total = None
    for f in factors:
        try:
            target = np.array([e.attributes[f.index] for e in batch], dtype=np.int64)
        except IndexError:
            raise DataError(f"batch lacks attribute column {f.index}") from None
        term = ad.cross_entropy(adversary_logits(params, z, adv_key(task_id, f.index), lam), target)
        total = term if total is None else total + term
    if total is None:
        raise UsageError("adv_loss called without factors")
    return total


def batch_loss(params: ModelParams, task: TaskSpec, batch: Sequence[Example], cfg: UpstreamConfig) -> Tensor:
    reg_factors = [f for f in task.factors if f.mitigation == "expl_reg"]
    adv_factors = [f for f in task.factors if f.mitigation == "adversarial"]
    ce, reg, z = _ce_and_reg(params, batch, task.task_id, reg_factors, cfg.alpha, cfg.phi_scale)
    loss = ce if reg is None else ce + reg
    if adv_factors:
        loss = loss + adv_loss(params, batch, task.task_id, adv_factors, cfg.lam, z=z)
    return loss


def prepare_params(
    tasks: Sequence[TaskSpec], encoder_config: EncoderConfig, seed: int, params: Optional[ModelParams] = None
) -> ModelParams:
    """Fresh (or given) encoder with one head per task and one adversary per adversarial factor."""
    params = init_params(encoder_config, derive_seed(seed, "encoder")) if params is None else params
    for t in tasks:
        if t.task_id not in params.heads:
            add_head(params, t.task_id, t.n_classes, t.harmful, derive_seed(seed, "head", t.task_id))
        for f in t.factors:
            key = adv_key(t.task_id, f.index)
            if f.mitigation == "adversarial" and key not in params.adv_heads:
                add_adv_head(params, key, derive_seed(seed, "adv", key))
    return params


def _fit_adversaries(params, task, examples, factors, adv_opt, steps) -> None:
    """Adversary-only updates on detached representations of ``examples``.

    Keeping the adversaries close to a best response stops the reversed
    gradient from merely relabelling the attribute along a stale direction.
    """
    z = Tensor(encode_batch(params, [e.token_ids for e in examples]).data)
    for _ in range(steps):
        adv_opt.zero_grad()
        adv_loss(params, examples, task.task_id, factors, 1.0, z=z).backward()
        adv_opt.step()


def _schedule(rng: np.random.Generator, tasks: Sequence[TaskSpec], batch_size: int) -> list[tuple[int, np.ndarray]]:
    """One epoch of ``(task index, example indices)``; tasks appear in proportion to their size."""
    slots = []
    for ti, t in enumerate(tasks):
        slots.extend((ti, b) for b in shuffled_batches(rng, len(t.train), batch_size))
    order = rng.permutation(len(slots))
    return [slots[i] for i in order]


def train_upstream(
    tasks: Sequence[TaskSpec],
    cfg: UpstreamConfig,
    encoder_config: EncoderConfig,
    params: Optional[ModelParams] = None,
) -> TrainResult:
    """Jointly train a shared encoder on ``tasks`` and return the best-validation parameters."""
    if not tasks:
        raise UsageError("train_upstream needs at least one task")
    if len({t.task_id for t in tasks}) != len(tasks):
        raise ConfigError("task ids must be unique")
    params = prepare_params(tasks, encoder_config, cfg.seed, params)
    opt = ad.Adam(params.encoder_tensors() + params.head_tensors(), lr=cfg.lr)
    adv_opt = ad.Adam(params.adv_tensors(), lr=cfg.lr * cfg.adv_lr_mult) if params.adv_heads else None
    rng = np.random.default_rng(derive_seed(cfg.seed, "upstream-schedule"))
    pool_rng = np.random.default_rng(derive_seed(cfg.seed, "adversary-pool"))
    stopper = EarlyStopping(cfg.patience)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for ti, idx in _schedule(rng, tasks, cfg.batch_size):
            task = tasks[ti]
            batch = [task.train[i] for i in idx]
            try:
                adv_factors = [f for f in task.factors if f.mitigation == "adversarial"]
                if adv_factors and cfg.adv_steps:
                    fit_on = batch
                    if cfg.adv_pool:
                        pick = pool_rng.choice(len(task.train), size=min(cfg.adv_pool, len(task.train)), replace=False)
                        fit_on = [task.train[i] for i in np.sort(pick)]
                    _fit_adversaries(params, task, fit_on, adv_factors, adv_opt, cfg.adv_steps)
                opt.zero_grad()
                if adv_opt is not None:
                    adv_opt.zero_grad()
                loss = batch_loss(params, task, batch, cfg)
                loss.backward()
                opt.step()
                if adv_opt is not None:
                    adv_opt.step()
            except NumericError as exc:
                raise NumericError(f"upstream divergence at epoch {epoch}, step {step}, task {task.task_id}: {exc}") from exc
            losses.append(loss.item())
            step += 1
        metric = float(np.mean([validation_metric(params, t, t.val) for t in tasks]))
        history.append({"epoch": epoch, "step": step, "train_loss": float(np.mean(losses)), "val_metric": metric})
        logger.info("upstream epoch %d step %d loss %.4f val %.4f", epoch, step, history[-1]["train_loss"], metric)
        if stopper.update(metric, params, step):
            break
    return TrainResult(stopper.best_params, stopper.best_step, float(stopper.best), history)
