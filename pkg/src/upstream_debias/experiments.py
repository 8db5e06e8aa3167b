"""Experiment orchestration: YAML configs, per-seed pipelines and result files.

A config names one or more source tasks, one target task and a list of
methods. Data is synthesized deterministically from ``(config, seed)``, so a
re-run with the same inputs reproduces every output file byte for byte.

Methods:

* ``Vanilla``: randomly initialized model trained on the target.
* ``ExplReg`` / ``AdvLearning``: mitigation applied directly on the target task.
* ``VanTransfer``: upstream on the sources without mitigation, then transfer.
* ``UBM_Reg``, ``UBM_Adv``, ``UBM_Reg+Reg``, ``UBM_Reg+Adv``: upstream with the
  sources' declared ``reg`` and/or ``adv`` factors mitigated, then transfer.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np
import yaml

from .corpus import (
    DIALECT,
    HARM,
    BiasFactorSpec,
    ExternalConfig,
    FactorInjection,
    TaskSpec,
    TemplateSet,
    Vocab,
    build_vocab,
    generate_external_negative,
    generate_synthetic,
    generate_templates,
    make_carriers,
    SynthConfig,
)
from .downstream import MODES, DownstreamConfig, fresh_init, train_downstream, transfer_init
from .errors import ConfigError, DebiasError, UsageError
from .metrics import MetricsReport, TracePoint, evaluate
from .model import EncoderConfig, ModelParams
from .training import derive_seed
from .upstream import UpstreamConfig, train_upstream

logger = logging.getLogger(__name__)

METHODS = ("Vanilla", "ExplReg", "AdvLearning", "VanTransfer", "UBM_Reg", "UBM_Adv", "UBM_Reg+Reg", "UBM_Reg+Adv")
TRANSFER_METHODS = ("VanTransfer", "UBM_Reg", "UBM_Adv", "UBM_Reg+Reg", "UBM_Reg+Adv")
CSV_COLUMNS = (
    "method",
    "seed",
    "in_domain_metric",
    "in_domain_fprd_mean",
    "template_fprd",
    "external_acc_identifier",
    "external_acc_dialect",
    "eer_threshold",
)
TRACE_COLUMNS = ("seed", "method", "step", "mean_abs_phi", "mean_grad_norm")
MISSING = "NA"


# --- config -----------------------------------------------------------------------


@dataclass(frozen=True)
class FactorDecl:
    """One injected bias factor; ``identifier`` factors are lexical, ``dialect`` ones attribute-only."""

    kind: str = "identifier"
    p_pos: float = 0.8
    p_neg: float = 0.1
    lexicon: int = 0

    def injection(self) -> FactorInjection:
        return FactorInjection(self.kind, self.p_pos, self.p_neg, self.lexicon)


@dataclass(frozen=True)
class TaskDecl:
    """A synthetic task. ``signal`` is a ``[start, stop)`` range in the harm partition;
    ``reg`` and ``adv`` list the factor indices each mitigation may act on."""

    name: str
    signal: tuple[int, int] = (0, 20)
    n_train: int = 1400
    n_classes: int = 2
    harmful: tuple[int, ...] = (1,)
    factors: tuple[FactorDecl, ...] = ()
    reg: tuple[int, ...] = ()
    adv: tuple[int, ...] = ()

    def __post_init__(self):
        if self.signal[0] < 0 or self.signal[1] <= self.signal[0]:
            raise ConfigError(f"task {self.name}: signal range must be [start, stop) with start < stop")
        for j in self.reg + self.adv:
            if not 0 <= j < len(self.factors):
                raise ConfigError(f"task {self.name}: mitigated factor {j} is not declared")
        for j in self.reg:
            if self.factors[j].kind != "identifier":
                raise ConfigError(f"task {self.name}: explanation regularization needs a lexical factor, got {j}")
        if set(self.reg) & set(self.adv):
            raise ConfigError(f"task {self.name}: a factor cannot be both regularized and adversarial")


@dataclass(frozen=True)
class VocabDecl:
    n_neutral: int = 300
    n_harm: int = 40
    lexicon_sizes: tuple[int, ...] = (10, 10)
    n_dialect: int = 40


@dataclass(frozen=True)
class DataDecl:
    n_val: int = 300
    n_test: int = 300
    length: tuple[int, int] = (5, 20)
    dialect_shift: float = 0.2
    neg_signal_rate: float = 0.0


@dataclass(frozen=True)
class EvalDecl:
    """Template and external-corpus settings. Templates use the target's signal tokens.

    ``lexicon`` is the biased identifier lexicon (external corpus and the template
    attribute). ``template_lexicons`` lists every lexicon whose identifiers fill the
    template slot; unbiased lexicons give the per-identifier contrast that the
    template FPRD measures. Defaults to ``(lexicon,)``.
    """

    lexicon: int = 0
    template_lexicons: tuple[int, ...] = ()
    n_nonhate: int = 20
    n_hate: int = 20
    carrier_length: tuple[int, int] = (4, 10)
    external_n: int = 500


@dataclass(frozen=True)
class EncoderDecl:
    embed_dim: int = 32
    hidden_dim: int = 64
    repr_dim: int = 32
    encoder_kind: str = "mean-pool-mlp"


@dataclass(frozen=True)
class TraceDecl:
    every: int = 20
    methods: tuple[str, ...] = ("VanTransfer", "UBM_Reg")


@dataclass(frozen=True)
class ExperimentConfig:
    target: TaskDecl
    sources: tuple[TaskDecl, ...] = ()
    methods: tuple[str, ...] = ("Vanilla", "VanTransfer", "UBM_Reg")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    vocab: VocabDecl = VocabDecl()
    data: DataDecl = DataDecl()
    evaluation: EvalDecl = EvalDecl()
    encoder: EncoderDecl = EncoderDecl()
    upstream: UpstreamConfig = UpstreamConfig()
    downstream: DownstreamConfig = DownstreamConfig()
    trace: TraceDecl = TraceDecl()
    output: str = "results"

    def __post_init__(self):
        validate_methods(self)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def with_overrides(
        self,
        seed: Optional[int] = None,
        mode: Optional[str] = None,
        beta: Optional[float] = None,
        alpha: Optional[float] = None,
        output: Optional[str] = None,
    ) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = dataclasses.replace(cfg, seeds=(int(seed),))
        if mode is not None or beta is not None:
            ds = cfg.downstream
            ds = dataclasses.replace(ds, mode=ds.mode if mode is None else mode, beta=ds.beta if beta is None else beta)
            cfg = dataclasses.replace(cfg, downstream=ds)
        if alpha is not None:
            cfg = dataclasses.replace(cfg, upstream=dataclasses.replace(cfg.upstream, alpha=alpha))
        if output is not None:
            cfg = dataclasses.replace(cfg, output=output)
        return cfg


def validate_methods(cfg: ExperimentConfig) -> None:
    """Reject method/config combinations before any compute happens."""
    if not cfg.methods:
        raise ConfigError("no methods requested")
    if not cfg.seeds:
        raise ConfigError("no seeds requested")
    names = [cfg.target.name] + [s.name for s in cfg.sources]
    if len(set(names)) != len(names):
        raise ConfigError("task names must be unique")
    reg_sources = [s for s in cfg.sources if s.reg]
    adv_sources = [s for s in cfg.sources if s.adv]
    for m in cfg.methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        if m in TRANSFER_METHODS and not cfg.sources:
            raise ConfigError(f"{m} needs at least one source task")
        if m in ("UBM_Reg", "UBM_Reg+Reg", "UBM_Reg+Adv") and not reg_sources:
            raise ConfigError(f"{m} needs a source with regularized factors")
        if m == "UBM_Reg+Reg" and len(reg_sources) < 2:
            raise ConfigError("UBM_Reg+Reg needs two sources with regularized factors")
        if m in ("UBM_Adv", "UBM_Reg+Adv") and not adv_sources:
            raise ConfigError(f"{m} needs a source with adversarial factors")
        if m == "ExplReg" and not cfg.target.reg:
            raise ConfigError("ExplReg needs regularized factors on the target task")
        if m == "AdvLearning" and not cfg.target.adv:
            raise ConfigError("AdvLearning needs adversarial factors on the target task")
    for f in (cfg.target,) + tuple(cfg.sources):
        for d in f.factors:
            if d.kind == "identifier" and not 0 <= d.lexicon < len(cfg.vocab.lexicon_sizes):
                raise ConfigError(f"task {f.name}: lexicon {d.lexicon} not in the vocabulary")
    if not 0 <= cfg.evaluation.lexicon < len(cfg.vocab.lexicon_sizes):
        raise ConfigError("evaluation lexicon not in the vocabulary")
    if cfg.trace.every < 1:
        raise ConfigError("trace.every must be >= 1")
    for m in cfg.trace.methods:
        if m not in TRANSFER_METHODS:
            raise ConfigError(f"trace method {m!r} is not a transfer method")


def _plain(x: Any) -> Any:
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _tuples(x: Any) -> Any:
    return tuple(_tuples(v) for v in x) if isinstance(x, list) else x


def _build(cls, data: Any, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if cls is TaskDecl and k == "factors":
            v = tuple(_build(FactorDecl, f, f"{where}.factors[{i}]") for i, f in enumerate(v or []))
        kwargs[k] = _tuples(v)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a mapping")
    d = dict(d)
    if "target" not in d:
        raise ConfigError("config needs a target task")
    kwargs: dict[str, Any] = {"target": _build(TaskDecl, d.pop("target"), "target")}
    kwargs["sources"] = tuple(_build(TaskDecl, s, f"sources[{i}]") for i, s in enumerate(d.pop("sources", None) or []))
    sections = {
        "vocab": VocabDecl,
        "data": DataDecl,
        "evaluation": EvalDecl,
        "encoder": EncoderDecl,
        "upstream": UpstreamConfig,
        "downstream": DownstreamConfig,
        "trace": TraceDecl,
    }
    for key, cls in sections.items():
        if key in d:
            kwargs[key] = _build(cls, d.pop(key), key)
    for key in ("methods", "seeds"):
        if key in d:
            kwargs[key] = tuple(d.pop(key))
    if "method" in d:
        kwargs["methods"] = (d.pop("method"),)
    if "output" in d:
        kwargs["output"] = str(d.pop("output"))
    if d:
        raise ConfigError(f"unknown config keys {sorted(d)}")
    return ExperimentConfig(**kwargs)


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


# --- per-seed data ----------------------------------------------------------------


@dataclass
class SeedData:
    vocab: Vocab
    encoder: EncoderConfig
    target: TaskSpec
    sources: list[TaskSpec]
    templates: TemplateSet
    external: dict[str, list]
    identifiers: list[int]


def _task(vocab: Vocab, decl: TaskDecl, data: DataDecl, seed: int) -> TaskSpec:
    synth = SynthConfig(
        n_classes=decl.n_classes,
        harmful=decl.harmful,
        n_train=decl.n_train,
        n_val=data.n_val,
        n_test=data.n_test,
        length=data.length,
        factors=tuple(f.injection() for f in decl.factors),
        dialect_shift=data.dialect_shift,
        signal_tokens=tuple(range(*decl.signal)),
        neg_signal_rate=data.neg_signal_rate,
        seed=derive_seed(seed, "data", decl.name),
    )
    splits = generate_synthetic(vocab, synth, decl.name)
    factors = tuple(
        BiasFactorSpec(j, "lexical", vocab.lexicon(f.lexicon)) if f.kind == "identifier" else BiasFactorSpec(j, "attribute")
        for j, f in enumerate(decl.factors)
    )
    return TaskSpec(decl.name, splits["train"], splits["val"], splits["test"], decl.n_classes, decl.harmful, factors)


def build_data(cfg: ExperimentConfig, seed: int) -> SeedData:
    """All datasets for one seed: source and target tasks, templates and external corpora."""
    v = cfg.vocab
    vocab = build_vocab(v.n_neutral, v.n_harm, v.lexicon_sizes, v.n_dialect)
    encoder = EncoderConfig(vocab_size=len(vocab), **dataclasses.asdict(cfg.encoder))
    target = _task(vocab, cfg.target, cfg.data, seed)
    sources = [_task(vocab, s, cfg.data, seed) for s in cfg.sources]
    ev = cfg.evaluation
    identifiers = sorted(set().union(*(vocab.lexicon(j) for j in ev.template_lexicons or (ev.lexicon,))))
    signal = vocab.ids(HARM)[cfg.target.signal[0] : cfg.target.signal[1]]
    carriers = make_carriers(vocab, signal, ev.n_nonhate, ev.n_hate, ev.carrier_length, derive_seed(seed, "carriers"))
    templates = generate_templates(identifiers, carriers, [vocab.lexicon(ev.lexicon)])
    external = {
        "identifier": generate_external_negative(
            vocab, ExternalConfig("identifier", ev.external_n, cfg.data.length, lexicon=ev.lexicon, seed=derive_seed(seed, "external", "identifier"))
        )
    }
    if vocab.ids(DIALECT):
        external["dialect"] = generate_external_negative(
            vocab,
            ExternalConfig("dialect", ev.external_n, cfg.data.length, cfg.data.dialect_shift, seed=derive_seed(seed, "external", "dialect")),
        )
    return SeedData(vocab, encoder, target, sources, templates, external, identifiers)


# --- methods ----------------------------------------------------------------------


def source_mitigations(method: str, decl: TaskDecl) -> dict[int, str]:
    """Factor -> mitigation for one source task under ``method``."""
    out: dict[int, str] = {}
    if method in ("UBM_Reg", "UBM_Reg+Reg", "UBM_Reg+Adv"):
        out.update({j: "expl_reg" for j in decl.reg})
    if method in ("UBM_Adv", "UBM_Reg+Adv"):
        out.update({j: "adversarial" for j in decl.adv})
    return out


@dataclass
class MethodRun:
    params: ModelParams
    upstream_step: Optional[int] = None
    downstream_step: Optional[int] = None
    val_metric: Optional[float] = None
    trace: list[TracePoint] = field(default_factory=list)
    init_head: bytes = b""


def upstream_for(cfg: ExperimentConfig, data: SeedData, method: str, seed: int, alpha: Optional[float] = None):
    tasks = [t.with_mitigations(source_mitigations(method, d)) for t, d in zip(data.sources, cfg.sources)]
    ucfg = dataclasses.replace(cfg.upstream, seed=seed)
    if alpha is not None:
        ucfg = dataclasses.replace(ucfg, alpha=alpha)
    return train_upstream(tasks, ucfg, data.encoder)


def head_seed(seed: int) -> int:
    """Shared by every method of a seed, so transferred models start from the same head."""
    return derive_seed(seed, "target-head")


def run_method(
    cfg: ExperimentConfig, data: SeedData, method: str, seed: int, trace_every: Optional[int] = None
) -> MethodRun:
    target = data.target
    dcfg = dataclasses.replace(cfg.downstream, seed=seed, head_seed=head_seed(seed), trace_every=trace_every)
    probe_kw = {}
    if trace_every:
        probe_kw = {"probe_examples": target.val, "probe_lexicon": data.vocab.lexicon(cfg.evaluation.lexicon)}
    if method == "Vanilla":
        params = fresh_init(data.encoder, target.task_id, target.n_classes, target.harmful, seed, head_seed(seed))
        init_head = params.heads[target.task_id].weight.data.tobytes()
        res = train_downstream(params, target, dataclasses.replace(dcfg, mode="fine-tune"), **probe_kw)
        return MethodRun(res.params, None, res.step, res.val_metric, res.trace, init_head)
    if method in ("ExplReg", "AdvLearning"):
        kind, idx = ("expl_reg", cfg.target.reg) if method == "ExplReg" else ("adversarial", cfg.target.adv)
        task = target.with_mitigations({j: kind for j in idx})
        res = train_upstream([task], dataclasses.replace(cfg.upstream, seed=seed), data.encoder)
        return MethodRun(res.params, res.step, None, res.val_metric)
    up = upstream_for(cfg, data, method, seed)
    params = transfer_init(up.params, target.task_id, target.n_classes, target.harmful, head_seed(seed))
    init_head = params.heads[target.task_id].weight.data.tobytes()
    res = train_downstream(params, target, dcfg, **probe_kw)
    return MethodRun(res.params, up.step, res.step, res.val_metric, res.trace, init_head)


# --- result files -----------------------------------------------------------------


def _fmt(x: Any) -> str:
    if x is None:
        return MISSING
    if isinstance(x, float):
        return repr(x)
    return str(x)


def report_row(method: str, seed: int, report: MetricsReport) -> dict[str, Any]:
    return {
        "method": method,
        "seed": seed,
        "in_domain_metric": report.in_domain_metric,
        "in_domain_fprd_mean": report.in_domain_fprd_mean,
        "template_fprd": report.template_fprd,
        "external_acc_identifier": report.external_acc.get("identifier"),
        "external_acc_dialect": report.external_acc.get("dialect"),
        "eer_threshold": report.eer_threshold,
    }


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    path.write_text(buf.getvalue())


def read_metrics_csv(path: Union[str, Path]) -> list[dict[str, Any]]:
    """Parse a metrics CSV back into typed rows (missing values become None)."""
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            row: dict[str, Any] = {}
            for k, v in r.items():
                if k == "method" or k == "statistic":
                    row[k] = v
                elif k in ("seed", "n"):
                    row[k] = int(v)
                else:
                    row[k] = None if v == MISSING else float(v)
            rows.append(row)
    return rows


def summarize(rows: Sequence[dict[str, Any]], methods: Sequence[str]) -> list[dict[str, Any]]:
    """Mean and population std (ddof=0) per method over seeds with a defined value."""
    out = []
    metrics = CSV_COLUMNS[2:]
    for m in methods:
        mine = [r for r in rows if r["method"] == m]
        if not mine:
            continue
        for stat in ("mean", "std"):
            row: dict[str, Any] = {"method": m, "statistic": stat, "n": len(mine)}
            for c in metrics:
                vals = [r[c] for r in mine if r[c] is not None]
                if not vals:
                    row[c] = None
                elif stat == "mean":
                    row[c] = float(np.mean(vals))
                else:
                    row[c] = float(np.std(vals))
            out.append(row)
    return out


@dataclass
class ExperimentResult:
    rows: list[dict[str, Any]]
    summary: list[dict[str, Any]]
    reports: dict[tuple[str, int], MetricsReport]
    failures: list[dict[str, Any]]
    out_dir: Path


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[Union[str, Path]] = None) -> ExperimentResult:
    """Run every (seed, method) pair and write ``metrics.csv``, ``summary.csv``,
    ``reports/*.json``, ``failures.json`` and the resolved ``config.yaml``.

    A stage error aborts that seed's remaining work; the other seeds proceed.
    """
    out = Path(out_dir if out_dir is not None else cfg.output)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    rows, reports, failures = [], {}, []
    for seed in cfg.seeds:
        method = "data"
        try:
            data = build_data(cfg, seed)
            for method in cfg.methods:
                logger.info("seed %d: %s", seed, method)
                run = run_method(cfg, data, method, seed)
                report = evaluate(run.params, data.target, data.templates, data.external, data.identifiers)
                reports[(method, seed)] = report
                rows.append(report_row(method, seed, report))
                detail = {
                    "method": method,
                    "seed": seed,
                    "upstream_step": run.upstream_step,
                    "downstream_step": run.downstream_step,
                    "val_metric": run.val_metric,
                    "report": report.to_dict(),
                }
                name = f"{method.replace('+', '_')}_seed{seed}.json"
                (out / "reports" / name).write_text(json.dumps(detail, sort_keys=True, indent=1) + "\n")
        except DebiasError as exc:
            logger.error("seed %d aborted at %s: %s", seed, method, exc)
            failures.append({"seed": seed, "stage": method, "error": f"{type(exc).__name__}: {exc}"})
    summary = summarize(rows, cfg.methods)
    _write_csv(out / "metrics.csv", CSV_COLUMNS, rows)
    _write_csv(out / "summary.csv", ("method", "statistic", "n") + CSV_COLUMNS[2:], summary)
    (out / "failures.json").write_text(json.dumps(failures, sort_keys=True, indent=1) + "\n")
    return ExperimentResult(rows, summary, reports, failures, out)


def trace_gradients(cfg: ExperimentConfig, out_dir: Optional[Union[str, Path]] = None) -> list[dict[str, Any]]:
    """Importance probe during downstream fine-tuning for ``cfg.trace.methods``.

    Every traced method of a seed starts from the same head initialization;
    rows are logged at step 0 and every ``cfg.trace.every`` steps.
    """
    out = Path(out_dir if out_dir is not None else cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in cfg.seeds:
        try:
            data = build_data(cfg, seed)
            heads = set()
            seed_rows = []
            for method in cfg.trace.methods:
                run = run_method(cfg, data, method, seed, trace_every=cfg.trace.every)
                heads.add(run.init_head)
                if len(heads) != 1:
                    raise UsageError("traced methods must share the head initialization")
                for p in run.trace:
                    seed_rows.append(
                        {"seed": seed, "method": method, "step": p.step, "mean_abs_phi": p.mean_abs_phi, "mean_grad_norm": p.mean_grad_norm}
                    )
            rows.extend(seed_rows)
        except DebiasError as exc:
            logger.error("trace seed %d aborted: %s", seed, exc)
    _write_csv(out / "trace.csv", TRACE_COLUMNS, rows)
    return rows
