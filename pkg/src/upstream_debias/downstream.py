"""Downstream stage: transfer the encoder, re-initialize the head and fine-tune
with no bias-mitigation objective."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Example, TaskSpec
from .errors import ConfigError, NumericError, ShapeError, UsageError
from .metrics import TracePoint, importance_gradient_probe
from .model import EncoderConfig, ModelParams, add_head, classify, encode_batch, init_params
from .training import EarlyStopping, TrainResult, derive_seed, shuffled_batches, validation_metric

logger = logging.getLogger(__name__)

MODES = ("fine-tune", "freeze", "l2sp")


@dataclass(frozen=True)
class DownstreamConfig:
    mode: str = "fine-tune"
    beta: float = 1.0
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    patience: Optional[int] = 3
    head_seed: int = 0
    seed: int = 0
    trace_every: Optional[int] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown downstream mode {self.mode!r}")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.trace_every is not None and self.trace_every < 1:
            raise ConfigError("trace_every must be >= 1")


def transfer_init(
    source: ModelParams,
    task_id: str,
    n_classes: int,
    harmful: Sequence[int],
    head_seed: int,
    target_config: Optional[EncoderConfig] = None,
) -> ModelParams:
    """Copy the source encoder exactly and attach one freshly initialized head.

    Every upstream task head and adversarial head is dropped.
    """
    if target_config is not None and target_config != source.config:
        raise ShapeError(
            "transfer_init",
            (source.config.vocab_size, source.config.embed_dim, source.config.hidden_dim, source.config.repr_dim),
            (target_config.vocab_size, target_config.embed_dim, target_config.hidden_dim, target_config.repr_dim),
        )
    encoder = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in source.encoder.items()}
    params = ModelParams(config=source.config, encoder=encoder)
    add_head(params, task_id, n_classes, harmful, head_seed)
    return params


def fresh_init(
    config: EncoderConfig, task_id: str, n_classes: int, harmful: Sequence[int], seed: int, head_seed: int
) -> ModelParams:
    """Randomly initialized model for the no-transfer (Vanilla) baseline."""
    params = init_params(config, derive_seed(seed, "encoder"))
    add_head(params, task_id, n_classes, harmful, head_seed)
    return params


def encoder_snapshot(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.encoder.items()}


def l2sp_penalty(params: ModelParams, init: dict[str, np.ndarray], beta: float) -> Tensor:
    """``beta * sum ||w - w0||^2`` over the encoder tensors only."""
    if set(init) != set(params.encoder):
        raise UsageError("l2sp_penalty: encoder structure differs from the initial point")
    total = None
    for name in sorted(init):
        w = params.encoder[name]
        if w.shape != init[name].shape:
            raise UsageError(f"l2sp_penalty: shape of {name} differs from the initial point")
        term = ad.sq_norm(w - Tensor(init[name]))
        total = term if total is None else total + term
    return ad.scale(total, beta)


def encoder_distance(params: ModelParams, init: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(np.sum((params.encoder[k].data - init[k]) ** 2) for k in init)))


def downstream_loss(
    params: ModelParams,
    task: TaskSpec,
    batch: Sequence[Example],
    cfg: DownstreamConfig,
    init: Optional[dict[str, np.ndarray]] = None,
) -> Tensor:
    """Cross-entropy, plus the l2-sp term in ``l2sp`` mode. Nothing else, whatever the task's factors say."""
    logits = classify(params, encode_batch(params, [e.token_ids for e in batch]), task.task_id)
    loss = ad.cross_entropy(logits, np.array([e.label for e in batch], dtype=np.int64))
    if cfg.mode == "l2sp":
        if init is None:
            raise UsageError("l2sp mode needs the initial encoder weights")
        loss = loss + l2sp_penalty(params, init, cfg.beta)
    return loss


@dataclass
class DownstreamResult(TrainResult):
    trace: list[TracePoint] = field(default_factory=list)
    init_encoder: dict[str, np.ndarray] = field(default_factory=dict)


def train_downstream(
    params: ModelParams,
    task: TaskSpec,
    cfg: DownstreamConfig,
    probe_examples: Sequence[Example] = (),
    probe_lexicon: frozenset[int] = frozenset(),
) -> DownstreamResult:
    """Fine-tune ``params`` on ``task`` and return the best-validation parameters.

    When ``cfg.trace_every`` is set, the importance probe runs on
    ``probe_examples`` at step 0 and every ``trace_every`` optimizer steps.
    """
    if params.adv_heads:
        raise UsageError("downstream training takes transferred parameters without adversarial heads")
    if set(params.heads) != {task.task_id}:
        raise UsageError(f"expected exactly one head for task {task.task_id!r}")
    init = encoder_snapshot(params)
    trainable = params.head_tensors(task.task_id)
    if cfg.mode != "freeze":
        trainable = params.encoder_tensors() + trainable
    opt = ad.Adam(trainable, lr=cfg.lr)
    rng = np.random.default_rng(derive_seed(cfg.seed, "downstream-schedule"))
    stopper = EarlyStopping(cfg.patience)
    trace: list[TracePoint] = []
    history = []

    def probe(step):
        res = importance_gradient_probe(params, probe_examples, [probe_lexicon], task.task_id)
        if res is not None:
            trace.append(TracePoint(step, res[0], res[1]))

    step = 0
    if cfg.trace_every:
        probe(0)
    for epoch in range(cfg.epochs):
        losses = []
        for idx in shuffled_batches(rng, len(task.train), cfg.batch_size):
            batch = [task.train[i] for i in idx]
            for t in params.all_tensors():
                t.grad = None
            try:
                loss = downstream_loss(params, task, batch, cfg, init)
                loss.backward()
                opt.step()
            except NumericError as exc:
                raise NumericError(f"downstream divergence at epoch {epoch}, step {step}: {exc}") from exc
            losses.append(loss.item())
            step += 1
            if cfg.trace_every and step % cfg.trace_every == 0:
                probe(step)
        metric = validation_metric(params, task, task.val)
        history.append(
            {
                "epoch": epoch,
                "step": step,
                "train_loss": float(np.mean(losses)),
                "val_metric": metric,
                "encoder_distance": encoder_distance(params, init),
            }
        )
        logger.info("downstream epoch %d step %d loss %.4f val %.4f", epoch, step, history[-1]["train_loss"], metric)
        if stopper.update(metric, params, step):
            break
    return DownstreamResult(stopper.best_params, stopper.best_step, float(stopper.best), history, trace, init)
