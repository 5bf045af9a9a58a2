"""Experiment configuration: one INI file, every key defaulted.

The resolved config is rendered back to canonical INI text (fixed section
and key order, ``repr``-stable number formatting). Its SHA-256 prefix is
the config hash stamped into every run artifact.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace

from .analysis import DEFAULT_PERTURBATION_SCHEDULE, PERTURBATIONS, AnalysisConfig
from .cil import ALGORITHMS, Hyper
from .errors import ConfigError
from .nn import Schedule

__all__ = [
    "DatasetSection",
    "SplitSection",
    "AlgorithmSection",
    "ScheduleSection",
    "AnalysisSection",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "render_config",
    "config_hash",
]


@dataclass(frozen=True)
class DatasetSection:
    classes: int = 10
    dim: int = 32
    train_per_class: int = 500
    val_per_class: int = 100
    radius: float = 4.0
    mean_dim: int = 0  # 0 = means span the full space
    seed: int = 0


@dataclass(frozen=True)
class SplitSection:
    base: int = 5
    steps: int = 5
    per_step: int = 1
    seed: int = 0


@dataclass(frozen=True)
class AlgorithmSection:
    name: str = "naive"
    branch_stage: int = 3
    distill_lambda: float = 1.0
    temperature: float = 2.0
    head_type: str = "cosine"
    scale: float = 24.0
    learnable_scale: bool = False
    exemplars_per_class: int = 20
    num_stages: int = 4
    width: int = 64
    feature_dim: int = 32
    layers_per_stage: int = 2
    init_gain: float = 2.45


@dataclass(frozen=True)
class ScheduleSection:
    base_epochs: int = 60
    incremental_epochs: int = 30
    exploit_epochs: int = 10
    lr: float = 0.1
    decay_power: float = 0.9
    batch_size: int = 64
    weight_decay: float = 5e-4
    seed: int = 0


@dataclass(frozen=True)
class AnalysisSection:
    retrain_epochs: int = 30
    retrain_seed: int = 0
    cka_batch: int = 256
    cka_passes: int = 10
    cka_seed: int = 0
    tsne_perplexity: float = 30.0
    tsne_iterations: int = 1000
    tsne_seed: int = 0
    shift_classes: int = 5
    shift_per_class: int = 20
    perturbation: str = "none"  # "none", "default" or "kind:strength,..."


_SECTIONS = (
    ("dataset", DatasetSection),
    ("split", SplitSection),
    ("algorithm", AlgorithmSection),
    ("schedule", ScheduleSection),
    ("analysis", AnalysisSection),
)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    split: SplitSection = field(default_factory=SplitSection)
    algorithm: AlgorithmSection = field(default_factory=AlgorithmSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    def __post_init__(self):
        _validate(self)

    # -- derived objects ------------------------------------------------

    def hyper(self) -> Hyper:
        a, s = self.algorithm, self.schedule

        def sched(epochs):
            return Schedule(epochs, s.lr, s.decay_power, s.batch_size, s.weight_decay)

        return Hyper(
            num_stages=a.num_stages, width=a.width, feature_dim=a.feature_dim,
            layers_per_stage=a.layers_per_stage, init_gain=a.init_gain,
            head_type=a.head_type, scale=a.scale, learnable_scale=a.learnable_scale,
            base=sched(s.base_epochs), incremental=sched(s.incremental_epochs),
            exploit=sched(s.exploit_epochs), distill_lambda=a.distill_lambda,
            temperature=a.temperature, exemplars_per_class=a.exemplars_per_class,
            branch_stage=a.branch_stage,
        )

    def analysis_config(self) -> AnalysisConfig:
        s, n = self.schedule, self.analysis
        return AnalysisConfig(
            retrain=Schedule(n.retrain_epochs, s.lr, s.decay_power, s.batch_size, s.weight_decay),
            retrain_seed=n.retrain_seed, cka_batch=n.cka_batch, cka_passes=n.cka_passes,
            cka_seed=n.cka_seed, tsne_perplexity=n.tsne_perplexity,
            tsne_iterations=n.tsne_iterations, tsne_seed=n.tsne_seed,
            shift_classes=n.shift_classes, shift_per_class=n.shift_per_class,
        )

    def perturbation_schedule(self):
        """``None`` for clean data, else one ``(kind, strength)`` per step."""
        return _parse_perturbation(self.analysis.perturbation, self.split.steps)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Same experiment with data, split and training seeds replaced."""
        return replace(
            self,
            dataset=replace(self.dataset, seed=seed),
            split=replace(self.split, seed=seed),
            schedule=replace(self.schedule, seed=seed),
        )

    def with_values(self, **sections) -> "ExperimentConfig":
        """``cfg.with_values(algorithm={"name": "der"})``"""
        changes = {}
        for name, values in sections.items():
            changes[name] = replace(getattr(self, name), **values)
        return replace(self, **changes)


def _parse_perturbation(text: str, steps: int):
    text = text.strip()
    if text == "none":
        return None
    if text == "default":
        items = list(DEFAULT_PERTURBATION_SCHEDULE)
    else:
        items = []
        for part in text.split(","):
            kind, sep, strength = part.strip().partition(":")
            if not sep:
                raise ConfigError(f"perturbation entry {part!r} is not kind:strength")
            try:
                items.append((kind.strip(), float(strength)))
            except ValueError:
                raise ConfigError(f"perturbation strength {strength!r} is not a number") from None
    for kind, _ in items:
        if kind not in PERTURBATIONS:
            raise ConfigError(f"unknown perturbation {kind!r}; choose from {', '.join(PERTURBATIONS)}")
    if len(items) != steps:
        raise ConfigError(f"perturbation schedule has {len(items)} entries for {steps} incremental stages")
    return items


def _validate(cfg: ExperimentConfig):
    d, sp, a, s, n = cfg.dataset, cfg.split, cfg.algorithm, cfg.schedule, cfg.analysis
    if min(d.classes, d.dim, d.train_per_class, d.val_per_class) < 1:
        raise ConfigError("dataset counts must be positive")
    if d.radius < 0:
        raise ConfigError("dataset.radius must be non-negative")
    if not 0 <= d.mean_dim <= d.dim:
        raise ConfigError("dataset.mean_dim must lie in [0, dim]")
    if sp.base + sp.steps * sp.per_step != d.classes:
        raise ConfigError(
            f"split.base + split.steps * split.per_step = {sp.base + sp.steps * sp.per_step}, "
            f"but dataset.classes = {d.classes}"
        )
    if a.name not in ALGORITHMS:
        raise ConfigError(f"algorithm.name must be one of {', '.join(ALGORITHMS)}")
    if a.head_type not in ("cosine", "linear"):
        raise ConfigError("algorithm.head_type must be cosine or linear")
    if not 0 <= a.branch_stage < a.num_stages:
        raise ConfigError(f"algorithm.branch_stage must lie in [0, {a.num_stages - 1}]")
    if a.temperature <= 0 or a.distill_lambda < 0:
        raise ConfigError("algorithm.temperature must be positive and distill_lambda non-negative")
    if min(s.base_epochs, s.incremental_epochs, s.exploit_epochs, s.batch_size) < 1 or s.lr < 0:
        raise ConfigError("schedule epochs and batch size must be positive, lr non-negative")
    if n.cka_batch < 4 or n.cka_passes < 1 or n.retrain_epochs < 1:
        raise ConfigError("analysis.cka_batch must be >= 4; passes and retrain epochs >= 1")
    _parse_perturbation(n.perturbation, sp.steps)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    known = dict(_SECTIONS)
    for name in parser.sections():
        if name not in known:
            raise ConfigError(f"{source}: unknown section [{name}]")
    sections = {}
    for name, cls in _SECTIONS:
        defaults = cls()
        names = {f.name for f in fields(cls)}
        values = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in names:
                    raise ConfigError(f"{source}: unknown key {name}.{key}")
                values[key] = _coerce(raw, getattr(defaults, key), f"{source}: {name}.{key}")
        sections[name] = cls(**values)
    return ExperimentConfig(**sections)


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def render_config(cfg: ExperimentConfig) -> str:
    """Canonical INI text with every key present."""
    lines = []
    for name, cls in _SECTIONS:
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(cls):
            lines.append(f"{f.name} = {_format(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(render_config(cfg).encode()).hexdigest()[:16]
