"""Declarative experiment configuration (YAML) with a stable content hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .cohort import ROLE_FLAGS
from .imaging import ORIENTATIONS, SLICE_OFFSETS
from .models import EncoderSpec
from .regress import INIT_KINDS
from .ssl.pretrain import METHODS


class ConfigError(ValueError):
    pass


@dataclass
class StudyConfig:
    """One synthetic study: size, role flags and per-study acquisition quirks."""

    name: str
    subjects: int
    roles: list[str] = field(default_factory=list)
    label_offset: float = 0.0
    orientations: list[str] = field(default_factory=lambda: ["RAS"])
    spacing_mm: list[float] = field(default_factory=lambda: [2.0, 2.0, 2.0])

    def __post_init__(self):
        if self.subjects < 0:
            raise ConfigError(f"study {self.name}: subjects must be >= 0")
        bad = [r for r in self.roles if r not in ROLE_FLAGS]
        if bad:
            raise ConfigError(f"study {self.name}: unknown role(s) {bad}; expected {ROLE_FLAGS}")
        bad = [o for o in self.orientations if o not in ORIENTATIONS]
        if bad or not self.orientations:
            raise ConfigError(f"study {self.name}: bad orientations {self.orientations}")


@dataclass
class PhantomConfig:
    shape: list[int] = field(default_factory=lambda: [48, 48, 36])
    signal_coef: float = 0.5
    label_noise: float = 1.0
    image_noise: float = 0.03
    texture_amplitude: float = 0.15


@dataclass
class GenericConfig:
    images: int = 1000
    size: int = 224


@dataclass
class DataConfig:
    seed: int = 1234
    studies: list[StudyConfig] = field(default_factory=list)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    ssl_slicing: str = "five"
    finetune_slicing: str = "center"
    ineligible_fraction: float = 0.1
    generic: GenericConfig = field(default_factory=GenericConfig)

    def __post_init__(self):
        for mode in (self.ssl_slicing, self.finetune_slicing):
            if mode not in SLICE_OFFSETS:
                raise ConfigError(f"slicing mode must be one of {sorted(SLICE_OFFSETS)}, got {mode!r}")
        if not 0.0 <= self.ineligible_fraction < 1.0:
            raise ConfigError("ineligible_fraction must lie in [0, 1)")
        names = [s.name for s in self.studies]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate study names in {names}")


@dataclass
class ModelConfig:
    arch: str = "small_cnn"
    width: int = 16
    depth: int = 4
    input_pool: int = 4

    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec(self.arch, 1, self.width, self.depth, self.input_pool)


@dataclass
class StageConfig:
    """One pretraining stage: objective plus the dataset it runs on."""

    dataset: str
    method: str
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    optimizer: str = "adam"
    temperature: float | None = None
    lambd: float = 5e-3
    prototypes: int = 32
    epsilon: float = 0.05
    sinkhorn_iters: int = 3
    projection_dim: int = 64
    hidden_dim: int = 128

    def __post_init__(self):
        if self.dataset not in ("generic", "indomain"):
            raise ConfigError(f"stage dataset must be 'generic' or 'indomain', got {self.dataset!r}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.method == "supervised" and self.dataset != "generic":
            raise ConfigError("supervised pretraining needs the labelled generic corpus")

    def ssl_kwargs(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("dataset")
        return d


@dataclass
class SslSection:
    stages: list[StageConfig] = field(default_factory=list)


@dataclass
class FinetuneSection:
    init: str = "auto"
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    encoder_lr_scale: float = 1.0

    def __post_init__(self):
        if self.init != "auto" and self.init not in INIT_KINDS:
            raise ConfigError(f"finetune.init must be 'auto' or one of {INIT_KINDS}")


@dataclass
class EvalSection:
    folds: int = 3
    test_fraction: float = 0.3
    ssl_train_fraction: float = 0.9
    residual_bins: int = 20
    test_sets: list[str] = field(default_factory=lambda: ["in_study", "out_study"])

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigError("eval.folds must be >= 2")
        bad = [t for t in self.test_sets if t not in ("in_study", "out_study")]
        if bad:
            raise ConfigError(f"unknown test set(s) {bad}")


@dataclass
class SaliencySection:
    images: int = 4
    layer: str | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    ssl: SslSection = field(default_factory=SslSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    eval: EvalSection = field(default_factory=EvalSection)
    saliency: SaliencySection = field(default_factory=SaliencySection)

    def init_kind(self) -> str:
        """Fine-tuning init scheme implied by the stage list unless set explicitly."""
        stages = self.ssl.stages
        if self.finetune.init != "auto":
            kind = self.finetune.init
        elif not stages:
            kind = "random"
        elif all(s.method == "supervised" for s in stages):
            kind = "supervised_generic"
        else:
            kind = "ssl_checkpoint"
        if (kind == "random") != (not stages):
            raise ConfigError(f"init scheme {kind!r} is inconsistent with {len(stages)} pretraining stage(s)")
        return kind

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    def canonical_json(self, exclude: tuple[str, ...] = ("output_dir",)) -> str:
        """Sorted-key compact JSON; ``output_dir`` is excluded since it names a location, not content."""
        d = {k: v for k, v in self.to_dict().items() if k not in exclude}
        return json.dumps(d, sort_keys=True, separators=(",", ":"), allow_nan=False)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def validate(self) -> None:
        self.init_kind()
        if not self.data.studies:
            raise ConfigError("data.studies is empty")
        if not any("finetune" in s.roles for s in self.data.studies):
            raise ConfigError("no study carries the finetune role")
        if any(s.dataset == "indomain" for s in self.ssl.stages) and not any("ssl" in s.roles for s in self.data.studies):
            raise ConfigError("an in-domain stage is configured but no study carries the ssl role")


# ----------------------------------------------------------------------------
# dict -> dataclass with type coercion (so "1" vs 1.0 in YAML hashes the same)


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and str(origin) == "<class 'types.UnionType'>"):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping, got {type(value).__name__}")
        return _build(tp, value, where)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return [_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value)]
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    return value


def _build(cls, raw: dict, where: str):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {unknown}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}" if where else k) for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, raw or {}, "")
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.to_yaml())


def default_studies(labeled: int = 300, unlabeled: int = 400, out_study: int = 40) -> list[StudyConfig]:
    """Synthetic stand-ins: an SSL-only study, two fine-tune studies, and an out-study
    test set with a label offset and a foreign orientation / voxel spacing."""
    first = labeled // 2
    return [
        StudyConfig("HABS", unlabeled, ["ssl"]),
        StudyConfig("ADNI", first, ["finetune", "in_study_test"]),
        StudyConfig("OASIS", labeled - first, ["finetune", "in_study_test"], orientations=["RAS", "LPS"]),
        StudyConfig("ABBY", out_study, ["out_study_test"], label_offset=0.5, orientations=["LPS"], spacing_mm=[2.5, 2.5, 2.5]),
    ]
