"""Command-line runner: ``cilab gen-data | run | analyze | compare``.

Run directory layout (append-only; ``analyze`` only adds files)::

    config.ini        resolved config, every key echoed, hash in the header
    dataset.bin       synthetic data, written by gen-data
    manifest.json     checkpoints, digests, run notes
    stage_<i>.ckpt    one model per stage (exploit: extractor.ckpt + head_<i>.ckpt)
    report.csv, cka.csv, tsne.csv, summary.json   written by analyze

Exit codes: 0 ok, 2 usage, 3 config, 4 protocol, 5 integrity, 6 I/O,
7 dimension, 8 parameter, 9 undefined similarity, 1 other library error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .analysis import analyze_run, perturb_stage_inputs
from .cil import StageModelSet, run_algorithm
from .config import ExperimentConfig, config_hash, load_config, render_config
from .data import Benchmark, make_benchmark, make_split, make_synthetic, SyntheticData
from .errors import ArtifactIOError, CilabError, ConfigError, IntegrityError
from .nn import ConcatHead, Model, load_extractor, load_head, load_model, save_extractor, save_head, save_model
from .numeric import RngStream

OUTPUT_ROOT_ENV = "CILAB_OUTPUT_ROOT"
DATASET_MAGIC = b"CILAB-DATASET 1\n"
log = logging.getLogger("cilab")


# --------------------------------------------------------------------------
# file helpers


def _write_text(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc


def _read_json(path: Path, missing=IntegrityError) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise missing(f"missing {path}") from None
    except (OSError, ValueError) as exc:
        raise IntegrityError(f"unreadable {path}: {exc}") from exc


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _csv_text(cfg_hash: str, header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={cfg_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for v in row])
    return buf.getvalue()


def default_run_dir(cfg: ExperimentConfig) -> Path:
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / f"{cfg.algorithm.name}-{config_hash(cfg)}"


# --------------------------------------------------------------------------
# dataset file: magic line, JSON header line, then raw little-endian arrays


def write_dataset(path: Path, data: SyntheticData, cfg: ExperimentConfig, class_order: np.ndarray):
    arrays = [
        ("x_train", np.ascontiguousarray(data.x_train, dtype="<f8")),
        ("y_train", np.ascontiguousarray(data.y_train, dtype="<i8")),
        ("x_val", np.ascontiguousarray(data.x_val, dtype="<f8")),
        ("y_val", np.ascontiguousarray(data.y_val, dtype="<i8")),
        ("means", np.ascontiguousarray(data.means, dtype="<f8")),
    ]
    header = {
        "config_hash": config_hash(cfg),
        "arrays": [{"name": n, "dtype": a.dtype.str, "shape": list(a.shape)} for n, a in arrays],
        "split": {
            "class_order": [int(c) for c in class_order],
            "base": cfg.split.base,
            "steps": cfg.split.steps,
            "per_step": cfg.split.per_step,
            "seed": cfg.split.seed,
        },
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(DATASET_MAGIC)
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            for _, a in arrays:
                fh.write(a.tobytes())
    except OSError as exc:
        raise ArtifactIOError(f"cannot write dataset {path}: {exc}") from exc


def read_dataset(path: Path) -> tuple[SyntheticData, dict]:
    try:
        with open(path, "rb") as fh:
            if fh.readline() != DATASET_MAGIC:
                raise IntegrityError(f"{path} is not a cilab dataset file")
            header = json.loads(fh.readline())
            out = {}
            for spec in header["arrays"]:
                dtype = np.dtype(spec["dtype"])
                count = int(np.prod(spec["shape"]))
                raw = fh.read(count * dtype.itemsize)
                if len(raw) != count * dtype.itemsize:
                    raise IntegrityError(f"{path}: truncated array {spec['name']}")
                out[spec["name"]] = np.frombuffer(raw, dtype=dtype).reshape(spec["shape"]).astype(
                    np.float64 if dtype.kind == "f" else np.int64)
    except FileNotFoundError:
        raise ArtifactIOError(f"dataset {path} not found; run gen-data first") from None
    except OSError as exc:
        raise ArtifactIOError(f"cannot read dataset {path}: {exc}") from exc
    except (ValueError, KeyError) as exc:
        raise IntegrityError(f"{path}: malformed header: {exc}") from exc
    data = SyntheticData(out["x_train"], out["y_train"], out["x_val"], out["y_val"], out["means"])
    return data, header


def generate(cfg: ExperimentConfig):
    d = cfg.dataset
    data = make_synthetic(d.classes, d.dim, d.train_per_class, d.val_per_class, d.radius,
                          RngStream(d.seed).derive("data"), d.mean_dim or None)
    split = make_split(d.classes, cfg.split.base, cfg.split.steps, cfg.split.per_step,
                       RngStream(cfg.split.seed).derive("split"), data.y_train, data.y_val)
    return data, split


def build_benchmark(cfg: ExperimentConfig, data: SyntheticData) -> Benchmark:
    split = make_split(cfg.dataset.classes, cfg.split.base, cfg.split.steps, cfg.split.per_step,
                       RngStream(cfg.split.seed).derive("split"), data.y_train, data.y_val)
    bench = make_benchmark(data, split)
    schedule = cfg.perturbation_schedule()
    if schedule is not None:
        bench = perturb_stage_inputs(bench, schedule, RngStream(cfg.dataset.seed).derive("perturb"))
    return bench


def _check_run_config(run_dir: Path, cfg: ExperimentConfig) -> dict:
    manifest = _read_json(run_dir / "manifest.json")
    if manifest.get("config_hash") != config_hash(cfg):
        raise ConfigError(
            f"{run_dir} was trained with config {manifest.get('config_hash')}, "
            f"but the given config hashes to {config_hash(cfg)}"
        )
    return manifest


# --------------------------------------------------------------------------
# verbs


def cmd_gen_data(cfg: ExperimentConfig, run_dir: Path) -> Path:
    data, split = generate(cfg)
    path = run_dir / "dataset.bin"
    write_dataset(path, data, cfg, split.class_order)
    _write_text(run_dir / "config.ini", f"# config_hash = {config_hash(cfg)}\n" + render_config(cfg))
    log.info("wrote %s (%d train, %d val rows)", path, len(data.y_train), len(data.y_val))
    return path


def cmd_run(cfg: ExperimentConfig, run_dir: Path) -> dict:
    data, header = read_dataset(run_dir / "dataset.bin")
    h = config_hash(cfg)
    if header.get("config_hash") != h:
        raise ConfigError(f"dataset in {run_dir} was generated under config {header.get('config_hash')}, not {h}")
    bench = build_benchmark(cfg, data)
    name = cfg.algorithm.name

    def progress(stage, state):
        log.info("%s: stage %d trained", name, stage)

    state = run_algorithm(bench, name, cfg.hyper(), RngStream(cfg.schedule.seed).derive("train"),
                          progress=progress)
    checkpoints = []
    meta = {"config_hash": h, "algorithm": name}
    if name == "exploit":
        final = state.snapshots[-1]
        d = save_extractor(run_dir / "extractor.ckpt", final.extractor, meta)
        checkpoints.append({"file": "extractor.ckpt", "digest": d})
        for i, head in enumerate(final.head.heads):
            d = save_head(run_dir / f"head_{i}.ckpt", head, dict(meta, stage=i))
            checkpoints.append({"file": f"head_{i}.ckpt", "digest": d})
        layout = "frozen-extractor"
    else:
        for i, snap in enumerate(state.snapshots):
            d = save_model(run_dir / f"stage_{i}.ckpt", snap, dict(meta, stage=i))
            checkpoints.append({"file": f"stage_{i}.ckpt", "digest": d})
        layout = "per-stage"
    manifest = {
        "config_hash": h,
        "algorithm": name,
        "layout": layout,
        "num_stages": state.num_stages,
        "split": {"seed": cfg.split.seed, "class_order": [int(c) for c in bench.split.class_order]},
        "algorithm_config": asdict(cfg.algorithm),
        "schedule": asdict(cfg.schedule),
        "checkpoints": checkpoints,
        "model_digests": state.digests,
        "extractor_digests": state.extractor_digests,
        "notes": state.notes,
    }
    _write_text(run_dir / "manifest.json", _dump_json(manifest))
    log.info("wrote %d checkpoints to %s", len(checkpoints), run_dir)
    return manifest


def load_run(run_dir: Path, manifest: dict) -> StageModelSet:
    """Rebuild the stage snapshots of a run from its checkpoints."""
    state = StageModelSet(manifest["algorithm"], notes=manifest.get("notes", {}))
    recorded = {c["file"]: c["digest"] for c in manifest["checkpoints"]}
    loaded = []
    if manifest["layout"] == "frozen-extractor":
        ext, hdr = load_extractor(run_dir / "extractor.ckpt")
        loaded.append(("extractor.ckpt", hdr))
        heads = []
        for i in range(manifest["num_stages"]):
            head, hdr = load_head(run_dir / f"head_{i}.ckpt")
            loaded.append((f"head_{i}.ckpt", hdr))
            heads.append(head)
            state.add(Model(ext, ConcatHead(list(heads))))
    else:
        for i in range(manifest["num_stages"]):
            model, hdr = load_model(run_dir / f"stage_{i}.ckpt")
            loaded.append((f"stage_{i}.ckpt", hdr))
            state.add(model)
    for fname, hdr in loaded:
        if recorded.get(fname) != hdr["digest"]:
            raise IntegrityError(f"{run_dir / fname} does not match the manifest digest")
    if state.digests != manifest["model_digests"]:
        raise IntegrityError(f"{run_dir}: rebuilt stage models do not match the recorded digests")
    return state


def cmd_analyze(cfg: ExperimentConfig, run_dir: Path) -> dict:
    manifest = _check_run_config(run_dir, cfg)
    data, _ = read_dataset(run_dir / "dataset.bin")
    bench = build_benchmark(cfg, data)
    state = load_run(run_dir, manifest)
    result = analyze_run(state, bench, cfg.analysis_config(), with_tsne=True)
    h = config_hash(cfg)
    n = state.num_stages

    header = ["stage", "acc_full"] + [f"acc_subset_{i}" for i in range(n)] + ["delta", "avg_inc_acc", "macs"]
    rows = [[r.stage, r.acc_full, *r.acc_subset, r.delta, r.avg_inc_acc, r.macs] for r in result.reports]
    _write_text(run_dir / "report.csv", _csv_text(h, header, rows))
    _write_text(run_dir / "cka.csv", _csv_text(h, ["tap_id", "cka"], [[t, v] for t, v in result.cka_curve]))
    ts = result.tsne
    trows = [[x, y, int(c), s] for (x, y), c, s in zip(ts["embedding"], ts["labels"], ts["sources"])]
    _write_text(run_dir / "tsne.csv", _csv_text(h, ["x", "y", "class", "source"], trows))

    summary = {
        "config_hash": h,
        "config": asdict(cfg),
        "algorithm": manifest["algorithm"],
        "stages": [
            {"stage": r.stage, "acc_full": r.acc_full, "acc_subset": r.acc_subset, "delta": r.delta,
             "avg_inc_acc": r.avg_inc_acc, "macs": r.macs}
            for r in result.reports
        ],
        "acc_m0": result.reports[0].acc_full,
        "acc_mN": result.reports[-1].acc_full,
        "delta_N": result.reports[-1].delta,
        "avg_inc_acc": result.reports[-1].avg_inc_acc,
        "incremental_acc": result.incremental_acc,
        "final_acc": result.final_acc,
        "cka": [{"tap_id": t, "cka": v} for t, v in result.cka_curve],
        "tsne": {"rows": len(trows), "kl_initial": ts["kl_initial"], "kl_final": ts["kl_final"],
                 "paired_shift": ts["shift"]},
    }
    _write_text(run_dir / "summary.json", _dump_json(summary))
    log.info("%s: acc(M'_0)=%.2f acc(M'_N)=%.2f delta=%+.2f", manifest["algorithm"],
             summary["acc_m0"], summary["acc_mN"], summary["delta_N"])
    return summary


COMPARE_COLUMNS = ["method", "acc_m0", "acc_mN", "delta_N", "avg_inc_acc", "final_acc"]
COMPARE_TITLES = ["method", "Acc(M'_0,D)", "Acc(M'_N,D)", "dM'_N", "Avg.Inc.Acc", "Acc(M_N,D)"]


def _method_label(summary: dict) -> str:
    alg = summary["config"]["algorithm"]
    name = alg["name"]
    if name == "distill":
        return f"distill(lambda={alg['distill_lambda']:g})"
    if name == "pder":
        return f"pder(branch={alg['branch_stage']})"
    return name


def cmd_compare(run_dirs: list[Path]) -> str:
    if not run_dirs:
        raise ConfigError("compare needs at least one run directory")
    summaries = [_read_json(Path(d) / "summary.json") for d in run_dirs]
    lines = []
    orders = {json.dumps(s["config"]["split"], sort_keys=True) for s in summaries}
    if len(orders) > 1:
        seeds = sorted({s["config"]["split"]["seed"] for s in summaries})
        lines.append(f"WARNING: runs use different class splits (split seeds {seeds}); rows are not directly comparable")
    widths = [max(len(t), 24 if i == 0 else 11) for i, t in enumerate(COMPARE_TITLES)]
    lines.append("  ".join(t.ljust(w) for t, w in zip(COMPARE_TITLES, widths)).rstrip())
    for s in summaries:
        cells = [_method_label(s)] + [f"{s[c]:.2f}" for c in COMPARE_COLUMNS[1:]]
        lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip())
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cilab", description="Class-incremental learning laboratory.")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="INI config file (defaults fill missing keys)")
        sp.add_argument("--run-dir", type=Path, help=f"run directory (default: ${OUTPUT_ROOT_ENV}/<algorithm>-<hash>)")
        sp.add_argument("--seed-override", type=int, metavar="N", help="replace the data, split and training seeds")
        sp.add_argument("--quiet", action="store_true", help="only print warnings and errors")

    common(sub.add_parser("gen-data", help="write the synthetic dataset"))
    common(sub.add_parser("run", help="train every stage and write checkpoints"))
    common(sub.add_parser("analyze", help="retrain classifiers and write reports"))
    cp = sub.add_parser("compare", help="tabulate analyzed runs")
    cp.add_argument("run_dirs", nargs="+", type=Path)
    cp.add_argument("--out", type=Path, help="also write the table to this file")
    cp.add_argument("--quiet", action="store_true")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        if args.verb == "compare":
            table = cmd_compare(args.run_dirs)
            if args.out is not None:
                _write_text(args.out, table)
            sys.stdout.write(table)
            return 0
        cfg = load_config(args.config)
        if args.seed_override is not None:
            cfg = cfg.with_seed(args.seed_override)
        run_dir = args.run_dir if args.run_dir is not None else default_run_dir(cfg)
        if args.verb == "gen-data":
            cmd_gen_data(cfg, run_dir)
        elif args.verb == "run":
            cmd_run(cfg, run_dir)
        else:
            cmd_analyze(cfg, run_dir)
        if not args.quiet:
            print(run_dir)
        return 0
    except CilabError as exc:
        print(f"cilab: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"cilab: I/O error: {exc}", file=sys.stderr)
        return ArtifactIOError.exit_code


if __name__ == "__main__":
    sys.exit(main())
