"""Command-line entry point: ``upstream-debias <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .corpus import Vocab, extract_lexicon, ingest_jsonl, write_jsonl
from .downstream import MODES, train_downstream, transfer_init
from .errors import ConfigError, DebiasError, UsageError
from .experiments import (
    CSV_COLUMNS,
    METHODS,
    TRANSFER_METHODS,
    ExperimentConfig,
    _write_csv,
    build_data,
    head_seed,
    load_config,
    report_row,
    run_experiment,
    run_method,
    source_mitigations,
    trace_gradients,
)
from .metrics import evaluate
from .training import derive_seed
from .upstream import train_upstream

logger = logging.getLogger("upstream_debias")


def _u64(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(
        seed=getattr(args, "seed", None),
        mode=getattr(args, "mode", None),
        beta=getattr(args, "beta", None),
        alpha=getattr(args, "alpha", None),
        output=getattr(args, "out", None),
    )


def _seed(cfg: ExperimentConfig) -> int:
    return cfg.seeds[0]


def _ckpt_config(cfg: ExperimentConfig, **extra) -> dict:
    return {"experiment": cfg.to_dict(), **extra}


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output)
    for seed in cfg.seeds:
        data = build_data(cfg, seed)
        root = out / f"seed{seed}" if len(cfg.seeds) > 1 else out
        root.mkdir(parents=True, exist_ok=True)
        (root / "vocab.json").write_text(json.dumps(data.vocab.to_dict(), sort_keys=True) + "\n")
        for task in [data.target] + data.sources:
            for split in ("train", "val", "test"):
                write_jsonl(getattr(task, split), data.vocab, root / task.task_id / f"{split}.jsonl")
        write_jsonl(data.templates.examples, data.vocab, root / "templates.jsonl")
        for name, corpus in data.external.items():
            write_jsonl(corpus, data.vocab, root / f"external_{name}.jsonl")
        logger.info("wrote datasets for seed %d to %s", seed, root)
    return 0


def cmd_extract_lexicon(args) -> int:
    vocab = Vocab.from_dict(json.loads(Path(args.vocab).read_text()))
    examples = ingest_jsonl(args.data, vocab, label_field=args.label_field, text_field=args.text_field)
    words = extract_lexicon(examples, vocab, args.k, harmful=tuple(args.harmful))
    payload = {"ids": list(words), "tokens": [vocab.tokens[i] for i in words]}
    text = json.dumps(payload, indent=1) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_train_upstream(args) -> int:
    cfg = _config(args)
    seed = _seed(cfg)
    data = build_data(cfg, seed)
    if args.method in ("ExplReg", "AdvLearning"):
        kind, idx = ("expl_reg", cfg.target.reg) if args.method == "ExplReg" else ("adversarial", cfg.target.adv)
        tasks = [data.target.with_mitigations({j: kind for j in idx})]
    else:
        if not data.sources:
            raise ConfigError("train-upstream needs source tasks in the config")
        tasks = [t.with_mitigations(source_mitigations(args.method, d)) for t, d in zip(data.sources, cfg.sources)]
    res = train_upstream(tasks, dataclasses.replace(cfg.upstream, seed=seed), data.encoder)
    path = Path(cfg.output) / "upstream.ckpt.json"
    save_checkpoint(path, Checkpoint(res.params, res.step, res.val_metric, data.vocab, _ckpt_config(cfg, stage="upstream", method=args.method, seed=seed)))
    print(path)
    return 0


def cmd_train_downstream(args) -> int:
    cfg = _config(args)
    seed = _seed(cfg)
    data = build_data(cfg, seed)
    target = data.target
    if args.checkpoint is None:
        run = run_method(cfg, data, "Vanilla", seed)
        params, step, metric, method = run.params, run.downstream_step, run.val_metric, "Vanilla"
    else:
        src = load_checkpoint(args.checkpoint)
        params = transfer_init(src.params, target.task_id, target.n_classes, target.harmful, head_seed(seed), data.encoder)
        dcfg = dataclasses.replace(cfg.downstream, seed=seed, head_seed=head_seed(seed))
        res = train_downstream(params, target, dcfg)
        params, step, metric, method = res.params, res.step, res.val_metric, src.config.get("method", "transfer")
    path = Path(cfg.output) / "downstream.ckpt.json"
    extra = {"stage": "downstream", "method": method, "seed": seed, "mode": cfg.downstream.mode}
    save_checkpoint(path, Checkpoint(params, step, metric, data.vocab, _ckpt_config(cfg, **extra)))
    print(path)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    seed = _seed(cfg)
    data = build_data(cfg, seed)
    ckpt = load_checkpoint(args.checkpoint)
    if data.target.task_id not in ckpt.params.heads:
        raise UsageError(f"checkpoint has no head for target task {data.target.task_id!r}")
    report = evaluate(ckpt.params, data.target, data.templates, data.external, data.identifiers)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    method = args.method or ckpt.config.get("method", "checkpoint")
    _write_csv(out / "metrics.csv", CSV_COLUMNS, [report_row(method, seed, report)])
    (out / "report.json").write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
    print(out / "metrics.csv")
    return 0


def cmd_trace_gradients(args) -> int:
    cfg = _config(args)
    trace_gradients(cfg)
    print(Path(cfg.output) / "trace.csv")
    return 0


def cmd_run_experiment(args) -> int:
    cfg = _config(args)
    result = run_experiment(cfg)
    print(result.out_dir / "metrics.csv")
    return 1 if result.failures and not result.rows else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="upstream-debias", description="Upstream bias mitigation experiments.")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True, out=True):
        p.add_argument("--config", required=True, help="experiment YAML file")
        if seed:
            p.add_argument("--seed", type=_u64, help="run this seed only (overrides the config's list)")
        if out:
            p.add_argument("--out", help="output directory (overrides the config)")

    p = sub.add_parser("gen-data", help="write the synthetic datasets as JSONL")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("extract-lexicon", help="top-k harmful-leaning tokens of a labeled JSONL corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--harmful", type=int, nargs="+", default=[1])
    p.add_argument("--label-field", default="label")
    p.add_argument("--text-field", default="text")
    p.add_argument("--out")
    p.set_defaults(func=cmd_extract_lexicon)

    p = sub.add_parser("train-upstream", help="train the source model and save a checkpoint")
    common(p)
    p.add_argument("--alpha", type=float)
    p.add_argument("--method", default="UBM_Reg", choices=[m for m in METHODS if m != "Vanilla"])
    p.set_defaults(func=cmd_train_upstream)

    p = sub.add_parser("train-downstream", help="transfer a checkpoint (or start fresh) and fine-tune on the target")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--beta", type=float)
    p.set_defaults(func=cmd_train_downstream)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the target task")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", help="label for the metrics row")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("trace-gradients", help="importance/gradient trace during fine-tuning")
    common(p)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--beta", type=float)
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_trace_gradients)

    p = sub.add_parser("run-experiment", help="all methods and seeds of a config")
    common(p)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--beta", type=float)
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_run_experiment)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DebiasError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
