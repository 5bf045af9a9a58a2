"""
Stability versus plasticity on a small incremental benchmark
============================================================

Ten Gaussian classes arrive as five base classes and then one class per
stage. After each stage we freeze the feature extractor and retrain a
fresh classifier on all data. The gain of that retrained accuracy over
stage 0 (dM') measures how much the features kept learning.

Runs take about a minute each on one core.
"""

import numpy as np

from cilab import RngStream, cli
from cilab.analysis import analyze_run
from cilab.cil import run_algorithm
from cilab.config import ExperimentConfig

base = ExperimentConfig()
data, _ = cli.generate(base)
bench = cli.build_benchmark(base, data)
print("class order:", bench.split.class_order.tolist(), "stage sizes:", bench.split.stage_sizes)

methods = {
    "naive": {},
    "exploit": {},
    "distill": {"distill_lambda": 100.0},
    "der": {},
    "pder": {"branch_stage": 3},
    "oracle": {},
}

print(f"\n{'method':8s} {'Acc(M0)':>8s} {'Acc(MN)':>8s} {'dM_N':>6s} {'CKA top':>8s} {'MACs':>7s}")
for name, extra in methods.items():
    cfg = base.with_values(algorithm=dict(name=name, **extra))
    state = run_algorithm(bench, name, cfg.hyper(), RngStream(cfg.schedule.seed).derive("train"))
    result = analyze_run(state, bench, cfg.analysis_config(), with_tsne=False)
    first, last = result.reports[0], result.reports[-1]
    print(f"{name:8s} {first.acc_full:8.1f} {last.acc_full:8.1f} {last.delta:+6.1f} "
          f"{result.cka_curve[-1][1]:8.3f} {last.macs:7d}")

    if name == "naive":
        naive_subsets = result.subset_matrix

# rows: stage model j, columns: class subset i; each subset should peak on the diagonal
np.set_printoptions(precision=0, suppress=True)
print("\nnaive Acc(M'_j, D_i) (rows j, columns i):")
print(naive_subsets)
