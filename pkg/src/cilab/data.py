"""Synthetic Gaussian-cluster benchmark and incremental class splits."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .numeric import RngStream

__all__ = ["SyntheticData", "make_synthetic", "IncrementalSplit", "make_split", "Benchmark", "make_benchmark"]


@dataclass
class SyntheticData:
    """Features and integer labels; labels are the original class ids."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    means: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def make_synthetic(
    num_classes: int = 10,
    dim: int = 32,
    train_per_class: int = 500,
    val_per_class: int = 100,
    radius: float = 4.0,
    rng: RngStream | None = None,
    mean_dim: int | None = None,
) -> SyntheticData:
    """Unit-variance Gaussian clusters whose means lie on a sphere of ``radius``.

    ``mean_dim`` confines the means to a random ``mean_dim``-dimensional
    subspace (the sphere's span); ``None`` uses the full space.
    """
    if num_classes < 1 or dim < 1 or train_per_class < 1 or val_per_class < 1:
        raise ConfigError("dataset sizes must be positive")
    if radius < 0:
        raise ConfigError("cluster radius must be non-negative")
    rng = rng if rng is not None else RngStream(0)
    k = dim if mean_dim is None else mean_dim
    if not 1 <= k <= dim:
        raise ConfigError(f"mean_dim must be in [1, {dim}]")
    mrng = rng.derive("means")
    directions = mrng.normal(size=(num_classes, k))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    if k < dim:
        basis, _ = np.linalg.qr(mrng.derive("basis").normal(size=(dim, k)))
        directions = directions @ basis.T
    means = radius * directions

    def draw(tag: str, per_class: int):
        r = rng.derive(tag)
        x = np.concatenate([means[c] + r.normal(size=(per_class, dim)) for c in range(num_classes)])
        y = np.repeat(np.arange(num_classes), per_class)
        return x, y

    x_tr, y_tr = draw("train", train_per_class)
    x_va, y_va = draw("val", val_per_class)
    return SyntheticData(x_tr, y_tr, x_va, y_va, means)


@dataclass
class IncrementalSplit:
    """Class partition into a base set and ``N`` incremental sets.

    ``class_order[k]`` is the original label that becomes internal label
    ``k``; stage ``i`` owns internal labels ``offsets[i]:offsets[i+1]``.
    Index lists refer to rows of the train/validation arrays.
    """

    class_order: np.ndarray
    base_count: int
    step_counts: list[int]
    train_indices: list[np.ndarray] = field(default_factory=list)
    val_indices: list[np.ndarray] = field(default_factory=list)

    @property
    def num_stages(self) -> int:
        return 1 + len(self.step_counts)

    @property
    def num_classes(self) -> int:
        return len(self.class_order)

    @property
    def stage_sizes(self) -> list[int]:
        return [self.base_count] + list(self.step_counts)

    @property
    def offsets(self) -> list[int]:
        return [0] + np.cumsum(self.stage_sizes).tolist()

    def stage_classes(self, stage: int) -> np.ndarray:
        """Internal labels introduced at ``stage``."""
        o = self.offsets
        return np.arange(o[stage], o[stage + 1])

    def seen_classes(self, stage: int) -> np.ndarray:
        return np.arange(self.offsets[stage + 1])

    def class_sets(self) -> list[np.ndarray]:
        """Original labels per stage."""
        o = self.offsets
        return [self.class_order[o[i]:o[i + 1]] for i in range(self.num_stages)]

    def assign(self, train_labels, val_labels) -> "IncrementalSplit":
        rank = np.empty(self.num_classes, dtype=np.int64)
        rank[self.class_order] = np.arange(self.num_classes)
        o = self.offsets

        def per_stage(labels):
            internal = rank[np.asarray(labels)]
            return [np.flatnonzero((internal >= o[i]) & (internal < o[i + 1])) for i in range(self.num_stages)]

        return replace(self, train_indices=per_stage(train_labels), val_indices=per_stage(val_labels))


def make_split(num_classes: int, base: int, steps: int, per_step: int, rng: RngStream,
               train_labels=None, val_labels=None) -> IncrementalSplit:
    if base < 1 or steps < 0 or per_step < 0:
        raise ConfigError("base must be positive and steps/per_step non-negative")
    if steps > 0 and per_step < 1:
        raise ConfigError("incremental steps need at least one class each")
    if base + steps * per_step != num_classes:
        raise ConfigError(
            f"base + steps * per_step = {base + steps * per_step} but there are {num_classes} classes"
        )
    order = rng.derive("class_order").permutation(num_classes)
    split = IncrementalSplit(order, base, [per_step] * steps)
    if train_labels is not None and val_labels is not None:
        split = split.assign(train_labels, val_labels)
    return split


@dataclass
class Benchmark:
    """Dataset relabelled into split order, ready for stage training.

    ``y_train``/``y_val`` hold internal labels (position in ``class_order``).
    """

    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    split: IncrementalSplit

    @property
    def num_classes(self) -> int:
        return self.split.num_classes

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]

    def train_rows(self, stages) -> np.ndarray:
        return np.concatenate([self.split.train_indices[i] for i in stages])

    def val_rows(self, stages) -> np.ndarray:
        return np.concatenate([self.split.val_indices[i] for i in stages])

    def with_inputs(self, x_train, x_val) -> "Benchmark":
        return replace(self, x_train=x_train, x_val=x_val)


def make_benchmark(data: SyntheticData, split: IncrementalSplit) -> Benchmark:
    if split.num_classes != data.num_classes:
        raise ConfigError("split and dataset disagree on the class count")
    rank = np.empty(split.num_classes, dtype=np.int64)
    rank[split.class_order] = np.arange(split.num_classes)
    if not split.train_indices:
        split = split.assign(data.y_train, data.y_val)
    return Benchmark(data.x_train, rank[data.y_train], data.x_val, rank[data.y_val], split)
