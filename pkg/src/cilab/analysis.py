"""Evaluation protocols for stage models.

The central tool is classifier retraining: freeze a stage's extractor,
fit a fresh head over *all* classes on the full training set, and read
its validation accuracy as a measure of the extractor's quality. Stage
deltas of that accuracy against stage 0 track plasticity; layerwise CKA
and paired feature distances track stability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cil import Hyper, StageModelSet, build_head
from .data import Benchmark
from .errors import ConfigError, IntegrityError, ParameterError, ProtocolError
from .nn import BranchedExtractor, ConcatHead, CosineClassifier, Schedule, count_macs, cross_entropy_masked, fit_head
from .numeric import RngStream
from .repsim import LayerTapSet, layerwise_cka, tsne_run

PERTURBATIONS = ("none", "gaussian_noise", "contrast", "pixelate", "impulse", "blur")
DEFAULT_PERTURBATION_SCHEDULE = (
    ("gaussian_noise", 1.0),
    ("contrast", 0.5),
    ("pixelate", 1.0),
    ("impulse", 0.2),
    ("blur", 0.8),
)


@dataclass
class AnalysisConfig:
    retrain: Schedule = field(default_factory=lambda: Schedule(epochs=30))
    retrain_seed: int = 0
    cka_batch: int = 256
    cka_passes: int = 10
    cka_seed: int = 0
    tsne_perplexity: float = 30.0
    tsne_iterations: int = 1000
    tsne_seed: int = 0
    shift_classes: int = 5
    shift_per_class: int = 20


@dataclass
class RetrainedModel:
    """Frozen stage extractor composed with a freshly trained all-class head."""

    extractor: object
    head: object
    retrain_seed: int
    extractor_digest: str

    def logits(self, x) -> np.ndarray:
        return self.head.logits(self.extractor.forward(x))

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)


@dataclass
class StageReport:
    stage: int
    acc_full: float
    acc_subset: list[float]
    delta: float | None = None
    avg_inc_acc: float | None = None
    cka_curve: list[tuple[str, float]] = field(default_factory=list)
    macs: int = 0

    def __post_init__(self):
        for a in [self.acc_full, *self.acc_subset]:
            if not 0.0 <= a <= 100.0:
                raise ParameterError(f"accuracy {a} outside [0, 100]")


def head_kind(head) -> dict:
    """Type and scale of a (possibly concatenated) head, for retraining."""
    if isinstance(head, ConcatHead):
        head = head.heads[0]
    if isinstance(head, CosineClassifier):
        return {"head_type": "cosine", "scale": float(head.scale[0])}
    return {"head_type": "linear", "linear_bias": head.bias is not None}


def retrain_classifier_full(extractor, bench: Benchmark, schedule: Schedule, rng: RngStream,
                            head_type: str = "cosine", scale: float = 24.0, linear_bias: bool = True,
                            expected_digest: str | None = None, retrain_seed: int | None = None) -> RetrainedModel:
    """Fit a fresh |C|-way head on the full training set over a frozen extractor.

    The head init and batch order depend on ``rng`` only, never on the
    stage, so equal extractors give bitwise-equal retrained models.
    """
    before = extractor.digest()
    if expected_digest is not None and before != expected_digest:
        raise IntegrityError("extractor snapshot does not match its recorded digest")
    hyper = Hyper(head_type=head_type, scale=scale, linear_bias=linear_bias)
    feats = extractor.forward(bench.x_train)
    head = build_head(hyper, bench.num_classes, extractor.out_dim, rng.derive("head"))
    y = bench.y_train
    classes = range(bench.num_classes)
    fit_head(head, feats, lambda idx: (lambda z: cross_entropy_masked(z, y[idx], classes)),
             schedule, rng.derive("fit"))
    if extractor.digest() != before:
        raise IntegrityError("retraining mutated the extractor")
    return RetrainedModel(extractor, head, rng.seed if retrain_seed is None else retrain_seed, before)


def accuracy(model, x, y) -> float:
    """Top-1 accuracy in percent; argmax over every logit the model emits."""
    y = np.asarray(y)
    if y.size == 0:
        raise ParameterError("cannot compute accuracy on an empty subset")
    pred = model.predict(x) if hasattr(model, "predict") else np.argmax(model.logits(x), axis=1)
    return 100.0 * float(np.mean(pred == y))


def delta_metric(reports) -> list[float]:
    """Per-stage gain of retrained full accuracy over stage 0."""
    accs = [r.acc_full if isinstance(r, StageReport) else float(r) for r in reports]
    if not accs:
        raise ProtocolError("no stage-0 report to compare against")
    if isinstance(reports[0], StageReport) and reports[0].stage != 0:
        raise ProtocolError("first report must be stage 0")
    return [a - accs[0] for a in accs]


def seen_class_accuracy(model, bench: Benchmark, stage: int) -> float:
    rows = bench.val_rows(range(stage + 1))
    return accuracy(model, bench.x_val[rows], bench.y_val[rows])


def avg_incremental_accuracy(stage_models: StageModelSet, bench: Benchmark) -> float:
    """Mean over stages of each stage model's accuracy on classes seen so far.

    Uses the stage's own incremental head, so predictions only range over
    seen classes. Stage 0 is included in the mean.
    """
    accs = [seen_class_accuracy(m, bench, i) for i, m in enumerate(stage_models.snapshots)]
    return float(np.mean(accs))


def comparison_extractor(extractor):
    """Single-path view used for CKA / feature-shift comparisons.

    Multi-branch extractors are compared through their newest branch (with
    the shared stem, if any), which has the same tap ids as the base model.
    """
    if isinstance(extractor, BranchedExtractor):
        return extractor.path(len(extractor.branches) - 1)
    return extractor


def feature_shift_export(extractor_a, extractor_b, bench: Benchmark, stage: int, rng: RngStream,
                         classes: int = 5, per_class: int = 20):
    """Features of the same validation inputs under two extractors.

    Samples ``classes`` classes of ``stage`` and ``per_class`` inputs each.
    Returns ``(features, labels, sources)`` with all A rows first, then the
    B rows in the same input order.
    """
    stage_classes = bench.split.stage_classes(stage)
    k = min(classes, len(stage_classes))
    chosen = np.sort(rng.derive("classes").choice(stage_classes, size=k, replace=False))
    rows = bench.split.val_indices[stage]
    picked = []
    for c in chosen:
        members = rows[bench.y_val[rows] == c]
        m = min(per_class, members.size)
        picked.append(np.sort(rng.derive("class", int(c)).choice(members, size=m, replace=False)))
    idx = np.concatenate(picked)
    x = bench.x_val[idx]
    fa = extractor_a.forward(x)
    fb = extractor_b.forward(x)
    if fa.shape[1] != fb.shape[1]:
        raise ProtocolError("feature-shift export needs extractors with equal output width")
    labels = np.concatenate([bench.y_val[idx], bench.y_val[idx]])
    sources = np.array(["A"] * len(idx) + ["B"] * len(idx))
    return np.vstack([fa, fb]), labels, sources


def shift_stage(bench: Benchmark, classes: int) -> int:
    """Newest stage owning at least ``classes`` classes (else the largest one)."""
    sizes = bench.split.stage_sizes
    for i in reversed(range(len(sizes))):
        if sizes[i] >= classes:
            return i
    return int(np.argmax(sizes))


def paired_shift(features: np.ndarray, sources: np.ndarray) -> float:
    """Mean Euclidean distance between paired A and B rows."""
    a = features[sources == "A"]
    b = features[sources == "B"]
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


# --------------------------------------------------------------------------
# task-dissimilarity perturbations


def _perturb(x: np.ndarray, kind: str, strength: float, rng: RngStream) -> np.ndarray:
    if strength == 0 or kind == "none":
        return x.copy()
    if kind == "gaussian_noise":
        return x + rng.normal(0.0, strength, size=x.shape)
    if kind == "contrast":
        m = x.mean(axis=1, keepdims=True)
        return m + (1.0 - strength) * (x - m)
    if kind == "pixelate":
        return np.round(x / strength) * strength
    if kind == "impulse":
        out = x.copy()
        hit = rng.random(x.shape) < strength
        sign = np.where(rng.random(x.shape) < 0.5, -1.0, 1.0)
        out[hit] = (3.0 * sign)[hit]
        return out
    if kind == "blur":
        neighbours = 0.5 * (np.roll(x, 1, axis=1) + np.roll(x, -1, axis=1))
        return (1.0 - strength) * x + strength * neighbours
    raise ConfigError(f"unknown perturbation {kind!r}; choose from {PERTURBATIONS}")


def perturb_stage_inputs(bench: Benchmark, schedule, rng: RngStream) -> Benchmark:
    """Corrupt each incremental stage's train and validation inputs with its own perturbation.

    ``schedule`` holds one ``(kind, strength)`` pair per incremental stage;
    stage 0 stays clean.
    """
    schedule = [tuple(s) for s in schedule]
    n = bench.split.num_stages - 1
    if len(schedule) != n:
        raise ConfigError(f"perturbation schedule has {len(schedule)} entries for {n} incremental stages")
    x_train = bench.x_train.copy()
    x_val = bench.x_val.copy()
    for i, (kind, strength) in enumerate(schedule, start=1):
        if kind not in PERTURBATIONS:
            raise ConfigError(f"unknown perturbation {kind!r}")
        srng = rng.derive("perturb", i)
        tr = bench.split.train_indices[i]
        va = bench.split.val_indices[i]
        x_train[tr] = _perturb(bench.x_train[tr], kind, float(strength), srng.derive("train"))
        x_val[va] = _perturb(bench.x_val[va], kind, float(strength), srng.derive("val"))
    return bench.with_inputs(x_train, x_val)


# --------------------------------------------------------------------------
# whole-run analysis


@dataclass
class RunAnalysis:
    reports: list[StageReport]
    subset_matrix: np.ndarray  # [j, i] = Acc(M'_j, D_i)
    incremental_acc: list[float]  # Acc(M_j, seen classes) with the stage head
    final_acc: float  # Acc(M_N, D) with the final incremental head
    cka_curve: list[tuple[str, float]]
    tsne: dict | None = None


def retrain_all(state: StageModelSet, bench: Benchmark, cfg: AnalysisConfig) -> list[RetrainedModel]:
    kind = head_kind(state.snapshots[0].head)
    out = []
    for snap, digest in zip(state.snapshots, state.extractor_digests):
        rng = RngStream(cfg.retrain_seed).derive("retrain")
        out.append(retrain_classifier_full(snap.extractor, bench, cfg.retrain, rng, expected_digest=digest,
                                           retrain_seed=cfg.retrain_seed, **kind))
    state.verify()
    return out


def stage_cka(state: StageModelSet, bench: Benchmark, cfg: AnalysisConfig, stage: int | None = None):
    """Layerwise mini-batch CKA between F_0 and F_stage on the D_0 validation inputs."""
    stage = state.num_stages - 1 if stage is None else stage
    rows = bench.split.val_indices[0]
    x = bench.x_val[rows]
    base = comparison_extractor(state.snapshots[0].extractor)
    other = comparison_extractor(state.snapshots[stage].extractor)
    _, taps_a = base.forward_with_taps(x)
    _, taps_b = other.forward_with_taps(x)
    batch = min(cfg.cka_batch, len(rows))
    return layerwise_cka(taps_a, taps_b, batch, cfg.cka_passes, RngStream(cfg.cka_seed).derive("cka"))


def analyze_run(state: StageModelSet, bench: Benchmark, cfg: AnalysisConfig | None = None,
                with_tsne: bool = True) -> RunAnalysis:
    cfg = cfg or AnalysisConfig()
    retrained = retrain_all(state, bench, cfg)
    n = state.num_stages
    subset = np.zeros((n, n))
    reports = []
    for j, m in enumerate(retrained):
        full = accuracy(m, bench.x_val, bench.y_val)
        for i in range(n):
            rows = bench.split.val_indices[i]
            subset[j, i] = accuracy(m, bench.x_val[rows], bench.y_val[rows])
        reports.append(StageReport(j, full, subset[j].tolist(), macs=count_macs(state.snapshots[j].extractor)))
    for r, d in zip(reports, delta_metric(reports)):
        r.delta = d
    inc = [seen_class_accuracy(m, bench, i) for i, m in enumerate(state.snapshots)]
    reports[-1].avg_inc_acc = float(np.mean(inc))
    curve = stage_cka(state, bench, cfg)
    reports[-1].cka_curve = curve
    tsne = None
    if with_tsne:
        feats, labels, sources = feature_shift_export(
            comparison_extractor(state.snapshots[0].extractor),
            comparison_extractor(state.snapshots[n - 1].extractor),
            bench, shift_stage(bench, cfg.shift_classes), RngStream(cfg.tsne_seed).derive("shift"),
            cfg.shift_classes, cfg.shift_per_class)
        perp = min(cfg.tsne_perplexity, (len(feats) - 1) / 3.0)
        res = tsne_run(feats, perp, cfg.tsne_iterations, RngStream(cfg.tsne_seed).derive("tsne"))
        tsne = {"embedding": res.embedding, "labels": labels, "sources": sources,
                "kl_initial": res.kl_initial, "kl_final": res.kl_final,
                "shift": paired_shift(feats, sources)}
    return RunAnalysis(reports, subset, inc, inc[-1], curve, tsne)
