"""Class-incremental training protocol: exemplars, stage learners and the oracle.

Every learner has the shape ``train_stage_*(state, bench, stage, ...)``
and appends a frozen snapshot of the stage model to ``state``. The
stage-0 model is shared by construction: all learners (and the oracle
trained on stage 0 only) call ``train_base`` with the same stream, so
they start from bitwise-identical models.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Benchmark
from .errors import ConfigError, IntegrityError, ProtocolError
from .nn import (
    BranchedExtractor,
    ConcatHead,
    CosineClassifier,
    FeatureExtractor,
    LinearClassifier,
    Model,
    Schedule,
    cross_entropy_masked,
    distill_loss,
    fit,
    fit_head,
)
from .numeric import RngStream

ALGORITHMS = ("naive", "distill", "exploit", "der", "pder", "oracle")


@dataclass
class Hyper:
    """Architecture, head and schedule knobs for stage training."""

    num_stages: int = 4
    width: int = 64
    feature_dim: int = 32
    layers_per_stage: int = 2
    init_gain: float = 2.45  # He-uniform; 1.0 gives the plain 1/sqrt(fan_in) bound
    head_type: str = "cosine"
    scale: float = 24.0
    learnable_scale: bool = False
    linear_bias: bool = True
    base: Schedule = field(default_factory=lambda: Schedule(epochs=60))
    incremental: Schedule = field(default_factory=lambda: Schedule(epochs=30))
    exploit: Schedule = field(default_factory=lambda: Schedule(epochs=10))
    distill_lambda: float = 1.0
    temperature: float = 2.0
    exemplars_per_class: int = 20
    branch_stage: int = 3

    def __post_init__(self):
        if self.head_type not in ("cosine", "linear"):
            raise ConfigError(f"unknown head type {self.head_type!r}")


def build_head(hyper: Hyper, num_classes: int, in_dim: int, rng: RngStream):
    if hyper.head_type == "cosine":
        return CosineClassifier.build(num_classes, in_dim, rng, hyper.scale, hyper.learnable_scale)
    return LinearClassifier.build(num_classes, in_dim, rng, bias=hyper.linear_bias)


def freeze(component):
    """Mark a component and all of its parts frozen (in place)."""
    if isinstance(component, Model):
        freeze(component.extractor)
        freeze(component.head)
    elif isinstance(component, BranchedExtractor):
        if component.stem is not None:
            component.stem.frozen = True
        for br in component.branches:
            br.frozen = True
    elif isinstance(component, ConcatHead):
        for h in component.heads:
            h.frozen = True
    else:
        component.frozen = True
    return component


# --------------------------------------------------------------------------
# exemplar memory


@dataclass
class ExemplarStore:
    capacity_per_class: int = 20
    indices: dict[int, np.ndarray] = field(default_factory=dict)

    def rows(self) -> np.ndarray:
        if not self.indices:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([self.indices[c] for c in sorted(self.indices)])

    def __len__(self):
        return sum(len(v) for v in self.indices.values())


def select_exemplars(bench: Benchmark, stage: int, store: ExemplarStore, rng: RngStream) -> ExemplarStore:
    """Uniformly sample up to ``capacity_per_class`` train rows of each class of ``stage``."""
    rows = bench.split.train_indices[stage]
    labels = bench.y_train[rows]
    for c in bench.split.stage_classes(stage):
        members = rows[labels == c]
        k = min(store.capacity_per_class, members.size)
        picked = rng.derive("class", int(c)).choice(members, size=k, replace=False)
        store.indices[int(c)] = np.sort(picked)
    return store


# --------------------------------------------------------------------------
# stage snapshots


@dataclass
class StageModelSet:
    """Frozen per-stage models of one run plus a digest per snapshot."""

    algorithm: str
    snapshots: list[Model] = field(default_factory=list)
    digests: list[str] = field(default_factory=list)
    extractor_digests: list[str] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def add(self, model: Model) -> Model:
        snap = freeze(copy.deepcopy(model))
        self.snapshots.append(snap)
        self.digests.append(snap.digest())
        self.extractor_digests.append(snap.extractor.digest())
        return snap

    def last(self, stage: int) -> Model:
        if stage < 1 or len(self.snapshots) < stage:
            raise ProtocolError(f"stage {stage} needs the stage {stage - 1} snapshot first")
        if len(self.snapshots) != stage:
            raise ProtocolError(f"stage {stage} already trained ({len(self.snapshots)} snapshots)")
        return self.snapshots[stage - 1]

    def verify(self):
        for i, (snap, d) in enumerate(zip(self.snapshots, self.digests)):
            if snap.digest() != d:
                raise IntegrityError(f"stage {i} snapshot was modified")

    @property
    def num_stages(self) -> int:
        return len(self.snapshots)


def _ce_over(classes):
    return lambda labels: (lambda logits: cross_entropy_masked(logits, labels, classes))


def train_base(bench: Benchmark, hyper: Hyper, rng: RngStream, stages=(0,)) -> Model:
    """Fresh model trained jointly on the union of ``stages`` (stage 0 by default)."""
    seen = int(bench.split.offsets[max(stages) + 1])
    extractor = FeatureExtractor.build(
        bench.dim, rng.derive("init", "extractor"), hyper.num_stages, hyper.width,
        hyper.feature_dim, hyper.layers_per_stage, hyper.init_gain,
    )
    head = build_head(hyper, seen, extractor.out_dim, rng.derive("init", "head"))
    model = Model(extractor, head)
    rows = bench.train_rows(stages)
    x, y = bench.x_train[rows], bench.y_train[rows]
    ce = _ce_over(range(seen))
    fit(model, x, lambda idx: ce(y[idx]), hyper.base, rng.derive("fit"))
    return model


def _stage_rng(rng: RngStream, stage: int) -> RngStream:
    return rng.derive("stage", stage)


def _training_rows(bench: Benchmark, stage: int, exemplars: ExemplarStore | None) -> np.ndarray:
    rows = bench.split.train_indices[stage]
    if exemplars is not None and len(exemplars):
        rows = np.concatenate([exemplars.rows(), rows])
    return rows


def _incremental_fit(model: Model, bench: Benchmark, stage: int, exemplars, hyper: Hyper,
                     rng: RngStream, teacher: Model | None = None, lam: float = 0.0):
    rows = _training_rows(bench, stage, exemplars)
    x, y = bench.x_train[rows], bench.y_train[rows]
    seen = int(bench.split.offsets[stage + 1])
    if teacher is not None and lam != 0.0:
        old = teacher.head.num_classes
        t_logits = teacher.logits(x)
        temp = hyper.temperature
        norm = 1.0 / (1.0 + lam)  # keeps the step size bounded for large lambda

        def make_loss(idx):
            labels, target = y[idx], t_logits[idx]

            def loss_fn(logits):
                ce, d = cross_entropy_masked(logits, labels, range(seen))
                kd, dk = distill_loss(logits[:, :old], target, temp)
                d = d.copy()
                d[:, :old] += lam * dk
                return norm * (ce + lam * kd), norm * d
            return loss_fn
    else:
        ce = _ce_over(range(seen))

        def make_loss(idx):
            return ce(y[idx])
    fit(model, x, make_loss, hyper.incremental, rng.derive("fit"))


def _check_stage(state: StageModelSet, stage: int):
    if stage == 0 and state.snapshots:
        raise ProtocolError("stage 0 already trained")


def train_stage_naive(state: StageModelSet, bench: Benchmark, stage: int,
                      exemplars: ExemplarStore | None, hyper: Hyper, rng: RngStream) -> StageModelSet:
    """Plain fine-tuning of the whole model on new data plus exemplars."""
    _check_stage(state, stage)
    srng = _stage_rng(rng, stage)
    if stage == 0:
        state.add(train_base(bench, hyper, srng))
        return state
    model = copy.deepcopy(state.last(stage))
    model.extractor.frozen = False
    new = len(bench.split.stage_classes(stage))
    model.head = model.head.grow(new, model.head.in_dim, srng.derive("init", "head"))
    _incremental_fit(model, bench, stage, exemplars, hyper, srng)
    state.add(model)
    return state


def train_stage_distill(state: StageModelSet, bench: Benchmark, stage: int,
                        exemplars: ExemplarStore | None, hyper: Hyper, rng: RngStream) -> StageModelSet:
    """Fine-tuning plus logit distillation from the previous stage on old classes."""
    _check_stage(state, stage)
    srng = _stage_rng(rng, stage)
    if stage == 0:
        state.add(train_base(bench, hyper, srng))
        return state
    teacher = state.last(stage)
    model = copy.deepcopy(teacher)
    model.extractor.frozen = False
    new = len(bench.split.stage_classes(stage))
    model.head = model.head.grow(new, model.head.in_dim, srng.derive("init", "head"))
    _incremental_fit(model, bench, stage, exemplars, hyper, srng, teacher, hyper.distill_lambda)
    state.add(model)
    return state


def train_stage_exploit(state: StageModelSet, bench: Benchmark, stage: int, hyper: Hyper,
                        rng: RngStream, exemplars: ExemplarStore | None = None) -> StageModelSet:
    """Frozen base extractor; one new head block per stage, softmax over its own classes."""
    _check_stage(state, stage)
    if exemplars is not None and len(exemplars):
        warnings.warn("exploit does not use exemplars; ignoring them", stacklevel=2)
    srng = _stage_rng(rng, stage)
    if stage == 0:
        base = train_base(bench, hyper, srng)
        state.add(Model(base.extractor, ConcatHead([base.head])))
        return state
    prev = state.last(stage)
    extractor = prev.extractor  # frozen snapshot, shared by reference
    classes = bench.split.stage_classes(stage)
    new_head = build_head(hyper, len(classes), extractor.out_dim, srng.derive("init", "head"))
    rows = bench.split.train_indices[stage]
    feats = extractor.forward(bench.x_train[rows])
    local = bench.y_train[rows] - classes[0]
    ce = _ce_over(range(len(classes)))
    fit_head(new_head, feats, lambda idx: ce(local[idx]), hyper.exploit, srng.derive("fit"))
    heads = [copy.deepcopy(h) for h in prev.head.heads] + [new_head]
    state.add(Model(extractor, ConcatHead(heads)))
    return state


def train_stage_der(state: StageModelSet, bench: Benchmark, stage: int,
                    exemplars: ExemplarStore | None, hyper: Hyper, rng: RngStream) -> StageModelSet:
    """Append a fresh full extractor per stage; older ones stay frozen."""
    return train_stage_pder(state, bench, stage, exemplars, hyper, rng, branch_stage=0)


def train_stage_pder(state: StageModelSet, bench: Benchmark, stage: int,
                     exemplars: ExemplarStore | None, hyper: Hyper, rng: RngStream,
                     branch_stage: int | None = None) -> StageModelSet:
    """DER on the extractor stages at and above ``branch_stage`` only.

    Lower stages of the base extractor become a frozen shared stem.
    ``branch_stage = 0`` replicates everything, i.e. plain DER.
    """
    _check_stage(state, stage)
    b = hyper.branch_stage if branch_stage is None else branch_stage
    if not 0 <= b < hyper.num_stages:
        raise ConfigError(f"branch_stage must be in [0, {hyper.num_stages - 1}], got {b}")
    srng = _stage_rng(rng, stage)
    if stage == 0:
        state.add(train_base(bench, hyper, srng))
        return state
    prev = copy.deepcopy(state.last(stage))
    ext = prev.extractor
    if isinstance(ext, FeatureExtractor):
        stem, upper = ext.split(b)
        ext = BranchedExtractor(stem, [upper])
    freeze(ext)
    fresh = ext.branches[0].fresh_like(srng.derive("init", "branch"), hyper.init_gain)
    ext = BranchedExtractor(ext.stem, ext.branches + [fresh])
    new = len(bench.split.stage_classes(stage))
    head = prev.head.grow(new, ext.out_dim, srng.derive("init", "head"))
    model = Model(ext, head)
    _incremental_fit(model, bench, stage, exemplars, hyper, srng)
    state.add(model)
    state.notes["head_init"] = "warm-start old class rows on old features; new entries fresh"
    return state


def train_oracle(bench: Benchmark, upto_stage: int, hyper: Hyper, rng: RngStream) -> Model:
    """Fresh model trained jointly on stages ``0..upto_stage`` with the base schedule."""
    return train_base(bench, hyper, _stage_rng(rng, 0), stages=tuple(range(upto_stage + 1)))


def run_algorithm(bench: Benchmark, algorithm: str, hyper: Hyper, rng: RngStream,
                  stages: int | None = None, progress=None) -> StageModelSet:
    """Train every stage of ``bench`` with ``algorithm``; returns all snapshots.

    ``progress(stage, state)`` is called after each stage if given.
    """
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}")
    n = bench.split.num_stages if stages is None else stages
    state = StageModelSet(algorithm)
    store = ExemplarStore(hyper.exemplars_per_class)
    for stage in range(n):
        try:
            _run_stage(state, bench, algorithm, stage, store, hyper, rng)
        except ProtocolError as exc:
            raise ProtocolError(f"{algorithm}, stage {stage}: {exc}") from exc
        if progress is not None:
            progress(stage, state)
    if algorithm not in ("oracle", "exploit"):
        state.notes["exemplars"] = {int(c): v.tolist() for c, v in store.indices.items()}
    return state


def _run_stage(state, bench, algorithm, stage, store, hyper, rng):
    if algorithm == "oracle":
        state.add(train_oracle(bench, stage, hyper, rng))
        return
    if algorithm == "exploit":
        train_stage_exploit(state, bench, stage, hyper, rng)
        return
    ex = store if stage > 0 else None
    if algorithm == "naive":
        train_stage_naive(state, bench, stage, ex, hyper, rng)
    elif algorithm == "distill":
        train_stage_distill(state, bench, stage, ex, hyper, rng)
    elif algorithm == "der":
        train_stage_der(state, bench, stage, ex, hyper, rng)
    else:
        train_stage_pder(state, bench, stage, ex, hyper, rng)
    select_exemplars(bench, stage, store, rng.derive("exemplars", stage))
