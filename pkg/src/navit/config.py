"""Run configuration: nested YAML sections mapped onto dataclasses with strict key checking."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field

import yaml

from .encoder.model import EncoderConfig
from .errors import ConfigError, NavitError
from .imageset import DEFAULT_AREA_LAW, DEFAULT_RATIO_LAW, Law
from .posemb import VARIANTS
from .sampling import DropPolicy, ResolutionSampler

ANALYSES = ("budget", "cascade", "ece", "posemb", "flops")


@dataclass(frozen=True)
class DatasetConfig:
    """Synthetic generator settings, or ``path`` to an NVPK file (then only ``eval_*`` apply)."""

    path: str = ""
    count: int = 512
    eval_count: int = 128
    ratio_law: Law = DEFAULT_RATIO_LAW
    area_law: Law = DEFAULT_AREA_LAW
    channels: int = 1
    num_classes: int = 4
    noise_std: float = 0.5
    amplitude: float = 1.0

    def validate(self):
        if self.count < 1:
            raise ConfigError("must be >= 1", "dataset.count")
        if self.eval_count < 0:
            raise ConfigError("must be >= 0", "dataset.eval_count")
        if self.channels < 1:
            raise ConfigError("must be >= 1", "dataset.channels")
        if self.num_classes < 1:
            raise ConfigError("must be >= 1", "dataset.num_classes")
        self.ratio_law.validate("dataset.ratio_law")
        self.area_law.validate("dataset.area_law")


@dataclass(frozen=True)
class PackingConfig:
    seq_len: int = 64
    max_examples: int = 8
    patch: int = 8
    batch_sequences: int = 4

    def validate(self):
        for name in ("seq_len", "max_examples", "patch", "batch_sequences"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", f"packing.{name}")


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 2
    width: int = 32
    heads: int = 2
    mlp_ratio: int = 4
    posemb: str = "fact-frac-sum"
    maxdim: int = 16
    precision: str = "single"

    def validate(self):
        if self.posemb not in VARIANTS:
            raise ConfigError(f"unknown variant {self.posemb!r}", "model.posemb")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"unknown precision {self.precision!r}", "model.precision")


@dataclass(frozen=True)
class TrainConfig:
    """``mode`` is ``navit`` (packed, aspect preserved) or ``vit`` (square ``vit_side`` resize, one image per sequence).

    Training stops after ``steps`` or, when ``flop_budget`` is positive, before
    the step that would exceed it.
    """

    mode: str = "navit"
    steps: int = 100
    flop_budget: float = 0.0
    loss: str = "sigmoid"
    temperature: float = 0.1
    chunk: int = 0
    schedule: str = "constant"
    base_lr: float = 1e-3
    warmup: int = 0
    cooldown: int = 0
    weight_decay: float = 1e-4
    vit_side: int = 224
    log_every: int = 1

    def validate(self):
        if self.mode not in ("navit", "vit"):
            raise ConfigError(f"unknown mode {self.mode!r}", "train.mode")
        if self.loss not in ("sigmoid", "contrastive"):
            raise ConfigError(f"unknown loss {self.loss!r}", "train.loss")
        if self.schedule not in ("constant", "rsqrt"):
            raise ConfigError(f"unknown schedule {self.schedule!r}", "train.schedule")
        if self.steps < 0:
            raise ConfigError("must be >= 0", "train.steps")
        if self.flop_budget < 0:
            raise ConfigError("must be >= 0", "train.flop_budget")
        if self.base_lr < 0:
            raise ConfigError("must be >= 0", "train.base_lr")
        if self.temperature <= 0:
            raise ConfigError("must be > 0", "train.temperature")
        if self.chunk < 0:
            raise ConfigError("must be >= 0", "train.chunk")
        if self.vit_side < 1:
            raise ConfigError("must be >= 1", "train.vit_side")
        if self.log_every < 1:
            raise ConfigError("must be >= 1", "train.log_every")


@dataclass(frozen=True)
class EvalConfig:
    analyses: tuple = ()
    reference_side: float = 32.0
    budgets: tuple = (4, 9, 16, 25, 36)
    cascade_budgets: tuple = (9, 25)
    alphas: tuple = (0.0, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0)
    posemb_grids: tuple = (4, 8, 16, 32)
    flop_widths: tuple = (64, 128, 256, 512, 768, 1024, 2048, 4096)
    flop_tokens: int = 256
    flop_packs: tuple = (1, 2, 4, 8)

    def validate(self):
        for name in self.analyses:
            if name not in ANALYSES:
                raise ConfigError(f"unknown analysis {name!r}; choose from {list(ANALYSES)}", "eval.analyses")
        if self.reference_side <= 0:
            raise ConfigError("must be > 0", "eval.reference_side")
        if len(self.cascade_budgets) != 2 or not self.cascade_budgets[0] < self.cascade_budgets[1]:
            raise ConfigError("needs two increasing budgets", "eval.cascade_budgets")
        for name in ("budgets", "posemb_grids", "flop_widths", "flop_packs"):
            if any(v < 1 for v in getattr(self, name)):
                raise ConfigError("entries must be >= 1", f"eval.{name}")
        if any(not 0 <= a <= 1 for a in self.alphas):
            raise ConfigError("entries must lie in [0, 1]", "eval.alphas")
        if self.flop_tokens < 1:
            raise ConfigError("must be >= 1", "eval.flop_tokens")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "out"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    sampler: ResolutionSampler = field(default_factory=lambda: ResolutionSampler(low=16.0, high=48.0))
    drop: DropPolicy = field(default_factory=DropPolicy)
    packing: PackingConfig = field(default_factory=PackingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        if not 0 <= self.seed < 2**64:
            raise ConfigError("must be an unsigned 64-bit integer", "seed")
        for section in (self.dataset, self.packing, self.model, self.train, self.eval):
            section.validate()
        if self.sampler.low < self.packing.patch:
            raise ConfigError(f"smallest side {self.sampler.low} is below the patch size", "sampler.low")
        self.encoder_config()
        return self

    def encoder_config(self, max_examples=None) -> EncoderConfig:
        m = self.model
        try:
            return EncoderConfig(depth=m.depth, width=m.width, heads=m.heads, mlp_ratio=m.mlp_ratio,
                                 patch=self.packing.patch, channels=self.dataset.channels,
                                 posemb=m.posemb, maxdim=m.maxdim,
                                 max_examples=max_examples or self.packing.max_examples,
                                 num_classes=self.dataset.num_classes, precision=m.precision)
        except ConfigError as exc:
            raise ConfigError(exc.message, exc.path.replace("encoder.", "model.")) from None

    def with_overrides(self, seed=None, precision=None, out_dir=None) -> RunConfig:
        out = self
        if out_dir is not None:
            out = dataclasses.replace(out, out_dir=str(out_dir))
        if seed is not None:
            out = dataclasses.replace(out, seed=seed)
        if precision is not None:
            out = dataclasses.replace(out, model=dataclasses.replace(out.model, precision=precision))
        return out.validate()

    def to_dict(self):
        return _plain(dataclasses.asdict(self))


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _convert(tp, value, path):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return from_mapping(tp, value, path)
    if tp is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {type(value).__name__}", path)
        return tuple(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", path)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        return value
    return value


def from_mapping(cls, data, path=""):
    """Build dataclass ``cls`` from a mapping; unknown keys and bad types raise :class:`ConfigError`."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping, got {type(data).__name__}", path or "<root>")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}.{unknown[0]}" if path else str(unknown[0])
        raise ConfigError(f"unknown key {unknown[0]!r}", where)
    kwargs = {}
    for name, value in data.items():
        where = f"{path}.{name}" if path else name
        kwargs[name] = _convert(hints[name], value, where)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        if path and not (exc.path or "").startswith(path):
            raise ConfigError(exc.message, f"{path}.{(exc.path or '').split('.')[-1]}".rstrip(".")) from None
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), path or "<root>") from None


def parse_config(text) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}", "<file>") from None
    return from_mapping(RunConfig, data).validate()


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", str(path)) from None
    return parse_config(text)


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


__all__ = [
    "ANALYSES",
    "ConfigError",
    "DatasetConfig",
    "EvalConfig",
    "ModelConfig",
    "NavitError",
    "PackingConfig",
    "RunConfig",
    "TrainConfig",
    "dump_config",
    "from_mapping",
    "load_config",
    "parse_config",
]
