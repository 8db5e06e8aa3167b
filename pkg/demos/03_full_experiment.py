"""Five seeds of every preset method, written to CSV and summarized.

This is the same run the command line performs with
``upstream-debias run-experiment --config configs/cross_domain.yaml``.
It prints the per-method mean and standard deviation of the headline columns
and how often each debiased method beat VanTransfer seed by seed.

Run: python demos/03_full_experiment.py [config.yaml]   (about a minute)
"""

import sys
from pathlib import Path

from upstream_debias.experiments import load_config, run_experiment

root = Path(__file__).resolve().parents[1]
path = Path(sys.argv[1]) if len(sys.argv) > 1 else root / "configs" / "cross_domain.yaml"
cfg = load_config(path)
result = run_experiment(cfg, root / cfg.output)
print(f"wrote {result.out_dir}/metrics.csv and summary.csv; failures: {len(result.failures)}")

cols = ("in_domain_metric", "template_fprd", "external_acc_identifier", "external_acc_dialect")
stats = {(s["method"], s["statistic"]): s for s in result.summary}
print(f"{'method':<12}" + "".join(f"{c:>26}" for c in cols))
for m in cfg.methods:
    cells = [f"{stats[(m, 'mean')][c]:.3f} +- {stats[(m, 'std')][c]:.3f}" for c in cols]
    print(f"{m:<12}" + "".join(f"{c:>26}" for c in cells))

if "VanTransfer" in cfg.methods:
    rows = {(r["method"], r["seed"]): r for r in result.rows}
    for m in cfg.methods:
        if m in ("Vanilla", "VanTransfer"):
            continue
        wins = sum(rows[(m, s)]["template_fprd"] < rows[("VanTransfer", s)]["template_fprd"] for s in cfg.seeds)
        print(f"{m}: lower template FPRD than VanTransfer on {wins} of {len(cfg.seeds)} seeds")
