"""Evaluation: EER threshold, F1/accuracy, false-positive-rate differences,
external-corpus accuracy and the importance-gradient probe."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .corpus import Example, TaskSpec, TemplateSet
from .errors import MetricError
from .model import ModelParams, predict_batch

logger = logging.getLogger(__name__)


class MetricWarning(UserWarning):
    pass


def eer_threshold(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Threshold ``t`` (predict 1 iff score >= t) where overall FPR is closest to FNR.

    Candidates are the midpoints between consecutive distinct scores plus
    -inf and +inf; ties go to the smaller threshold.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape or s.size == 0:
        raise MetricError("eer_threshold: scores and labels must be non-empty and aligned")
    if y.min() == y.max():
        raise MetricError("eer_threshold: both classes must be present")
    u = np.unique(s)
    cands = np.concatenate([[-np.inf], (u[:-1] + u[1:]) / 2.0, [np.inf]])
    neg = np.sort(s[y == 0])
    pos = np.sort(s[y == 1])
    fp = neg.size - np.searchsorted(neg, cands, side="left")
    fn = np.searchsorted(pos, cands, side="left")
    # |fp/n_neg - fn/n_pos| scaled by n_neg * n_pos: exact integers, so ties are real ties.
    gap = np.abs(fp.astype(np.int64) * pos.size - fn.astype(np.int64) * neg.size)
    return float(cands[int(np.argmin(gap))])


def _binary(x: Sequence[int]) -> np.ndarray:
    return np.asarray(x).astype(int)


def false_positive_rate(pred: np.ndarray, labels: np.ndarray) -> Optional[float]:
    neg = labels == 0
    if not neg.any():
        return None
    return float(np.mean(pred[neg] == 1))


def fprd(
    predictions: Sequence[int], labels: Sequence[int], attrs: np.ndarray, j: int
) -> Optional[float]:
    """FPR on ``a_j = 1`` minus FPR on ``a_j = 0``; None if either group has no negatives."""
    pred, y = _binary(predictions), _binary(labels)
    a = np.asarray(attrs).reshape(len(y), -1)[:, j].astype(bool)
    in_group = false_positive_rate(pred[a], y[a])
    out_group = false_positive_rate(pred[~a], y[~a])
    if in_group is None or out_group is None:
        return None
    return in_group - out_group


def template_fprd(
    predictions: Sequence[int], labels: Sequence[int], group_of_example: Sequence[int]
) -> float:
    """Sum over groups of ``|FPR_group - FPR_overall|``."""
    pred, y = _binary(predictions), _binary(labels)
    groups = np.asarray(group_of_example)
    overall = false_positive_rate(pred, y)
    if overall is None:
        raise MetricError("template_fprd: no negative examples")
    total = 0.0
    for z in np.unique(groups):
        m = groups == z
        rate = false_positive_rate(pred[m], y[m])
        if rate is None:
            warnings.warn(f"template group {z} has no negatives; skipped", MetricWarning, stacklevel=2)
            continue
        total += abs(rate - overall)
    return total


def external_accuracy(predictions: Sequence[int]) -> float:
    """Fraction predicted negative on an all-negative corpus (1 - FPR)."""
    pred = _binary(predictions)
    if pred.size == 0:
        raise MetricError("external_accuracy: empty corpus")
    return float(np.mean(pred == 0))


def f1_binary(predictions: Sequence[int], labels: Sequence[int]) -> float:
    pred, y = _binary(predictions), _binary(labels)
    if pred.size == 0:
        raise MetricError("f1_binary: empty input")
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    if 2 * tp + fp + fn == 0:
        warnings.warn("F1 undefined without predicted or actual positives; reporting 0", MetricWarning, stacklevel=2)
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    pred, y = np.asarray(predictions), np.asarray(labels)
    if pred.size == 0:
        raise MetricError("accuracy: empty input")
    return float(np.mean(pred == y))


# --- importance probe ---------------------------------------------------------------


@dataclass(frozen=True)
class TracePoint:
    step: int
    mean_abs_phi: float
    mean_grad_norm: float


def importance_gradient_probe(
    params: ModelParams,
    examples: Sequence[Example],
    lexicons: Sequence[frozenset[int]],
    task_id: str,
    phi_scale: str = "prob",
) -> Optional[tuple[float, float]]:
    """Mean ``|phi(w, x)|`` and mean ``||d phi / d theta_encoder||_2`` over (example, word) pairs.

    Returns None when no lexicon word occurs in ``examples``.
    """
    from .upstream import occlusion_importance

    words = frozenset().union(*lexicons) if lexicons else frozenset()
    pairs = [(e, w) for e in examples for w in sorted(set(e.token_ids) & words)]
    if not pairs:
        return None
    tensors = params.all_tensors()
    saved = [t.grad for t in tensors]
    enc = params.encoder_tensors()
    phis, norms = [], []
    try:
        for e, w in pairs:
            for t in tensors:
                t.grad = None
            phi = occlusion_importance(params, e.token_ids, w, task_id, phi_scale)
            phi.backward()
            sq = sum(float(np.dot(t.grad.ravel(), t.grad.ravel())) for t in enc if t.grad is not None)
            phis.append(abs(phi.item()))
            norms.append(np.sqrt(sq))
    finally:
        for t, g in zip(tensors, saved):
            t.grad = g
    return float(np.mean(phis)), float(np.mean(norms))


def attribute_probe_accuracy(
    params: ModelParams,
    train: Sequence[Example],
    test: Sequence[Example],
    j: int,
    steps: int = 300,
    lr: float = 0.05,
    seed: int = 0,
) -> float:
    """Accuracy of a fresh linear probe for attribute ``j`` on frozen representations.

    The probe is fitted with full-batch Adam on ``train`` and scored on ``test``;
    the encoder is never updated.
    """
    from . import autodiff as ad
    from .autodiff import Tensor
    from .model import encode_batch

    def frozen(examples):
        z = encode_batch(params, [e.token_ids for e in examples]).data
        a = np.array([e.attributes[j] for e in examples], dtype=np.int64)
        return z, a

    z_tr, a_tr = frozen(train)
    z_te, a_te = frozen(test)
    mu, sd = z_tr.mean(axis=0), z_tr.std(axis=0) + 1e-8
    x_tr, x_te = Tensor((z_tr - mu) / sd), (z_te - mu) / sd
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(0.0, 0.01, size=(z_tr.shape[1], 2)), requires_grad=True)
    b = Tensor(np.zeros(2), requires_grad=True)
    opt = ad.Adam([w, b], lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        ad.cross_entropy(x_tr @ w + b, a_tr).backward()
        opt.step()
    pred = (x_te @ w.data + b.data).argmax(axis=1)
    return float(np.mean(pred == a_te))


# --- report -------------------------------------------------------------------------


@dataclass
class MetricsReport:
    in_domain_metric: float
    eer_threshold: float
    fprd_per_factor: dict[int, Optional[float]] = field(default_factory=dict)
    fprd_per_identifier: dict[int, Optional[float]] = field(default_factory=dict)
    in_domain_fprd_mean: Optional[float] = None
    in_domain_fprd_sum: Optional[float] = None
    template_fprd: Optional[float] = None
    external_acc: dict[str, float] = field(default_factory=dict)
    thresholds: dict[str, float] = field(default_factory=dict)
    importance_trace: Optional[list[TracePoint]] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fprd_per_factor"] = {str(k): v for k, v in self.fprd_per_factor.items()}
        d["fprd_per_identifier"] = {str(k): v for k, v in self.fprd_per_identifier.items()}
        return d


Scorer = Callable[[Sequence[Sequence[int]]], tuple[np.ndarray, np.ndarray]]


def evaluate_scorer(
    scorer: Scorer,
    task: TaskSpec,
    templates: Optional[TemplateSet] = None,
    external: Optional[Mapping[str, Sequence[Example]]] = None,
    identifiers: Sequence[int] = (),
) -> MetricsReport:
    """Assemble a report for any ``scorer(seqs) -> (harm scores, argmax labels)``.

    The EER threshold is fitted once on ``task.val`` and reused for every
    binary decision.
    """
    val_scores, _ = scorer([e.token_ids for e in task.val])
    t = eer_threshold(val_scores, task.binary_labels(task.val))

    test = task.test
    scores, argmax = scorer([e.token_ids for e in test])
    y_bin = task.binary_labels(test)
    pred = (scores >= t).astype(int)
    thresholds = {"in_domain": t}
    if task.n_classes == 2:
        in_domain = f1_binary(pred, y_bin)
    else:
        in_domain = accuracy(argmax, [e.label for e in test])

    attrs = np.array([e.attributes for e in test], dtype=int).reshape(len(test), -1)
    per_factor = {f.index: fprd(pred, y_bin, attrs, f.index) for f in task.factors}

    per_ident: dict[int, Optional[float]] = {}
    for z in identifiers:
        mentions = np.array([[int(z in e.token_ids)] for e in test], dtype=int)
        per_ident[int(z)] = fprd(pred, y_bin, mentions, 0)
    defined = [v for v in per_ident.values() if v is not None]

    report = MetricsReport(
        in_domain_metric=float(in_domain),
        eer_threshold=t,
        fprd_per_factor=per_factor,
        fprd_per_identifier=per_ident,
        in_domain_fprd_mean=float(np.mean(defined)) if defined else None,
        in_domain_fprd_sum=float(np.sum(defined)) if defined else None,
        thresholds=thresholds,
    )
    if templates is not None:
        tscores, _ = scorer([e.token_ids for e in templates.examples])
        tlabels = task.binary_labels(templates.examples)
        report.template_fprd = template_fprd((tscores >= t).astype(int), tlabels, templates.groups)
        thresholds["templates"] = t
    for name, corpus in (external or {}).items():
        escores, _ = scorer([e.token_ids for e in corpus])
        report.external_acc[name] = external_accuracy((escores >= t).astype(int))
        thresholds[f"external:{name}"] = t
    return report


def evaluate(
    params: ModelParams,
    task: TaskSpec,
    templates: Optional[TemplateSet] = None,
    external: Optional[Mapping[str, Sequence[Example]]] = None,
    identifiers: Sequence[int] = (),
) -> MetricsReport:
    def scorer(seqs):
        return predict_batch(params, seqs, task.task_id)

    return evaluate_scorer(scorer, task, templates, external, identifiers)
