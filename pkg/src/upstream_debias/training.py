"""Pieces shared by the upstream and downstream training loops."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Example, TaskSpec
from .model import ModelParams, predict_batch


def derive_seed(seed: int, *keys) -> int:
    """Stable child seed for ``(seed, *keys)``; independent of ``PYTHONHASHSEED``."""
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    words += [zlib.crc32(str(k).encode()) for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0])


def shuffled_batches(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def macro_f1(pred: np.ndarray, labels: np.ndarray) -> float:
    scores = []
    for c in (0, 1):
        tp = np.sum((pred == c) & (labels == c))
        fp = np.sum((pred == c) & (labels != c))
        fn = np.sum((pred != c) & (labels == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def validation_metric(params: ModelParams, task: TaskSpec, examples: Sequence[Example]) -> float:
    """Macro-F1 of argmax predictions for binary tasks, accuracy for multiclass."""
    _, pred = predict_batch(params, [e.token_ids for e in examples], task.task_id)
    labels = np.array([e.label for e in examples])
    if task.n_classes == 2:
        return macro_f1(pred, labels)
    return float(np.mean(pred == labels))


@dataclass
class TrainResult:
    """Best-validation parameters plus the bookkeeping needed for checkpoints."""

    params: ModelParams
    step: int
    val_metric: float
    history: list[dict] = field(default_factory=list)


class EarlyStopping:
    def __init__(self, patience: int | None):
        self.patience = patience
        self.best = -np.inf
        self.best_params: ModelParams | None = None
        self.best_step = 0
        self.bad_epochs = 0

    def update(self, metric: float, params: ModelParams, step: int) -> bool:
        """Record an epoch's metric; return True when training should stop."""
        if metric > self.best:
            self.best = metric
            self.best_params = params.copy()
            self.best_step = step
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.patience is not None and self.bad_epochs >= self.patience
