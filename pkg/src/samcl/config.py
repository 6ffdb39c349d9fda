"""Experiment configuration and its flat ``section.key = value`` text format."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

from samcl.errors import ConfigError
from samcl.learners import LEARNERS, REHEARSAL
from samcl.modulation import VARIANTS, ModulationScheme


@dataclass
class BenchmarkConfig:
    kind: str = "shapes"  # shapes | manifest
    manifest: str = ""
    num_classes: int = 10
    num_tasks: int = 5
    classes_per_task: int = 2
    samples_per_class: int = 300
    test_fraction: float = 0.2
    image_size: int = 32
    clutter: int = 4
    spurious_scale: float = 0.0


@dataclass
class LearnerConfig:
    kind: str = "finetune"
    buffer: int = 0
    alpha: float = 0.5
    beta: float = 0.5
    temperature: float = 2.0
    lwf_weight: float = 1.0
    ewc_strength: float = 100.0
    ewc_decay: float = 0.9


@dataclass
class SamConfig:
    variant: str = "none"  # none | sam | sim | sai | lsm
    scheme: str = "11111"
    lam: float = 1.0
    train_saliency: bool = True


@dataclass
class TrainConfig:
    stream_batch: int = 8
    replay_batch: int = 8
    lr: float = 0.03
    momentum: float = 0.0
    seeds: list = field(default_factory=lambda: [0])


@dataclass
class PretrainConfig:
    kind: str = "saliency"  # saliency | classification | none
    epochs: int = 5
    lr: float = 0.03
    classes: int = 10
    samples_per_class: int = 100


@dataclass
class AttackSection:
    eps: list = field(default_factory=lambda: [0.0, 2.0, 4.0, 8.0])  # in 1/255 units
    steps: int = 10
    step_size: float = 0.0  # 0 -> 2.5 * eps / steps
    random_start: bool = True


SECTIONS = {
    "benchmark": BenchmarkConfig,
    "learner": LearnerConfig,
    "sam": SamConfig,
    "train": TrainConfig,
    "pretrain": PretrainConfig,
    "attack": AttackSection,
}


@dataclass
class ExperimentConfig:
    name: str = ""
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    sam: SamConfig = field(default_factory=SamConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    attack: AttackSection = field(default_factory=AttackSection)

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        variant = self.sam.variant
        if variant == "sam":
            variant = f"sam[{self.sam.scheme}]"
        return f"{self.learner.kind}/b{self.learner.buffer}/{variant}"

    def validate(self) -> "ExperimentConfig":
        b, lr, s, t = self.benchmark, self.learner, self.sam, self.train
        if b.kind not in ("shapes", "manifest"):
            raise ConfigError(f"benchmark.kind: must be 'shapes' or 'manifest', got {b.kind!r}")
        if b.kind == "manifest" and not b.manifest:
            raise ConfigError("benchmark.manifest: required when benchmark.kind = manifest")
        if b.num_tasks < 1 or b.classes_per_task < 1:
            raise ConfigError("benchmark.num_tasks / benchmark.classes_per_task: must be >= 1")
        if b.kind == "shapes" and b.num_classes < b.num_tasks * b.classes_per_task:
            raise ConfigError(
                f"benchmark.num_classes: {b.num_classes} < num_tasks x classes_per_task = "
                f"{b.num_tasks * b.classes_per_task}"
            )
        if lr.kind not in LEARNERS:
            raise ConfigError(f"learner.kind: must be one of {LEARNERS}, got {lr.kind!r}")
        if lr.buffer < 0:
            raise ConfigError("learner.buffer: must be >= 0")
        if (lr.buffer > 0) != (lr.kind in REHEARSAL):
            raise ConfigError(
                f"learner.buffer: rehearsal learners {REHEARSAL} need buffer > 0 and the others "
                f"buffer = 0 (got {lr.kind} with buffer {lr.buffer})"
            )
        if s.variant not in VARIANTS:
            raise ConfigError(f"sam.variant: must be one of {VARIANTS}, got {s.variant!r}")
        try:
            ModulationScheme.parse(s.scheme, 5)
        except ConfigError as exc:
            raise ConfigError(f"sam.scheme: {exc}") from None
        if t.stream_batch < 1 or t.replay_batch < 1:
            raise ConfigError("train.stream_batch / train.replay_batch: must be >= 1")
        if t.lr <= 0:
            raise ConfigError("train.lr: must be > 0")
        if not t.seeds:
            raise ConfigError("train.seeds: at least one seed is required")
        if self.pretrain.kind not in ("saliency", "classification", "none"):
            raise ConfigError(f"pretrain.kind: must be saliency|classification|none, got {self.pretrain.kind!r}")
        if self.attack.steps < 1:
            raise ConfigError("attack.steps: must be >= 1")
        return self

    def digest(self) -> str:
        return hashlib.sha256(serialize_config(self).encode()).hexdigest()[:12]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(_format(v) for v in value)
    return str(value)


def _coerce(key: str, raw: str, typ, current):
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is list:
            elem = type(current[0]) if current else float
            return [elem(v) for v in raw.split(",") if v.strip()]
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {getattr(typ, '__name__', typ)}") from None


def _resolve_key(key: str):
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"{key}: unknown section {section!r}; expected one of {sorted(SECTIONS)}")
        if name not in {f.name for f in dataclasses.fields(SECTIONS[section])}:
            raise ConfigError(f"{key}: unknown key in section {section!r}")
        return section, name
    if key == "name":
        return None, "name"
    owners = [s for s, cls in SECTIONS.items() if key in {f.name for f in dataclasses.fields(cls)}]
    if len(owners) != 1:
        raise ConfigError(f"{key}: unknown key" if not owners else f"{key}: ambiguous key, qualify it as one of "
                          + ", ".join(f"{o}.{key}" for o in owners))
    return owners[0], key


def apply_setting(cfg: ExperimentConfig, key: str, raw: str) -> None:
    section, name = _resolve_key(key.strip())
    if section is None:
        cfg.name = raw.strip()
        return
    obj = getattr(cfg, section)
    typ = get_type_hints(type(obj))[name]
    setattr(obj, name, _coerce(f"{section}.{name}", raw, typ, getattr(obj, name)))


def parse_config_text(text: str, overrides=()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        apply_setting(cfg, key, value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, value = item.split("=", 1)
        apply_setting(cfg, key, value)
    return cfg.validate()


def parse_config(path=None, overrides=()) -> ExperimentConfig:
    """Read a config file (or start from defaults when ``path`` is None) and apply overrides."""
    text = ""
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        text = p.read_text(encoding="utf-8")
    return parse_config_text(text, overrides)


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    if cfg.name:
        lines.append(f"name = {cfg.name}")
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def with_settings(cfg: ExperimentConfig, **settings) -> ExperimentConfig:
    """Copy of ``cfg`` with dotted-key settings, e.g. ``with_settings(cfg, **{"sam.variant": "sam"})``."""
    new = dataclasses.replace(
        cfg, **{s: dataclasses.replace(getattr(cfg, s)) for s in SECTIONS}
    )
    new.train.seeds = list(cfg.train.seeds)
    new.attack.eps = list(cfg.attack.eps)
    for key, value in settings.items():
        apply_setting(new, key, _format(value))
    return new.validate()
