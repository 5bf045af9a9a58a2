"""
Watching features move between stages
======================================

The same 100 validation inputs are embedded twice, once by the stage-0
extractor (A) and once by the final one (B). A frozen extractor puts each
B point exactly on its A twin. A fine-tuned one drifts.

Writes one CSV per method into the current directory.
"""

import csv

from cilab import RngStream, cli
from cilab.analysis import analyze_run
from cilab.cil import run_algorithm
from cilab.config import ExperimentConfig

base = ExperimentConfig()
data, _ = cli.generate(base)
bench = cli.build_benchmark(base, data)

for name in ("exploit", "naive"):
    cfg = base.with_values(algorithm={"name": name})
    state = run_algorithm(bench, name, cfg.hyper(), RngStream(0).derive("train"))
    tsne = analyze_run(state, bench, cfg.analysis_config()).tsne
    print(f"{name:8s} mean A-B distance {tsne['shift']:.3f}   "
          f"KL {tsne['kl_initial']:.3f} -> {tsne['kl_final']:.3f}")

    with open(f"shift_{name}.csv", "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["x", "y", "class", "source"])
        for (x, y), c, s in zip(tsne["embedding"], tsne["labels"], tsne["sources"]):
            out.writerow([x, y, int(c), s])
