"""Experiment configuration: sectioned key-value files, defaults, overrides.

Format: ``[section]`` headers, ``key = value`` lines, ``#`` comments. Unknown
sections or keys are hard errors, and the whole config is validated before
any filesystem work. CLI flags override file values, which override the
package defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .attack import AttackConfig
from .errors import ConfigError
from .masking import LfmConfig
from .nn import MiniResNetConfig


@dataclass(frozen=True)
class DataConfig:
    seed: int = 7
    n_identities: int = 75
    views_per_id: int = 8
    n_cams: int = 4
    train_identities: int = 50


@dataclass(frozen=True)
class ModelSection:
    stem_channels: int = 16
    stage_widths: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    embedding_dim: int = 64
    dropout: float = 0.0
    lfm: bool = False


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    label_smoothing: float = 0.0
    flip: bool = True
    pad_crop: bool = False
    cutout: bool = False
    cutout_side: int = 16
    cutout_fill: float = 0.0
    lr_decay_epochs: tuple = (20,)
    lr_decay_gamma: float = 0.1


@dataclass(frozen=True)
class EvalSection:
    distance: str = "euclidean"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/exp"


@dataclass(frozen=True)
class CompareSection:
    methods: tuple = ("baseline", "dropout", "lfm", "lfm+cutout+dropout")
    dropout_rate: float = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    lfm: LfmConfig = field(default_factory=LfmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunConfig = field(default_factory=RunConfig)
    compare: CompareSection = field(default_factory=CompareSection)

    def validate(self) -> None:
        d = self.data
        if d.n_identities < 2 or d.views_per_id < 2 or d.n_cams < 2:
            raise ConfigError("data section needs n_identities>=2, views_per_id>=2, n_cams>=2")
        if not 1 <= d.train_identities < d.n_identities:
            raise ConfigError(
                f"train_identities={d.train_identities} must leave at least one of "
                f"{d.n_identities} identities for testing"
            )
        t = self.train
        if t.epochs < 0 or t.batch_size < 1:
            raise ConfigError("train section needs epochs>=0 and batch_size>=1")
        if t.lr <= 0 or not 0 <= t.momentum < 1 or t.weight_decay < 0:
            raise ConfigError("train section needs lr>0, 0<=momentum<1, weight_decay>=0")
        if not 0 <= t.label_smoothing <= 0.3:
            raise ConfigError(f"label_smoothing must be in [0, 0.3], got {t.label_smoothing}")
        if t.cutout_side < 1:
            raise ConfigError(f"cutout_side must be >= 1, got {t.cutout_side}")
        if not 0 < t.lr_decay_gamma <= 1:
            raise ConfigError(f"lr_decay_gamma must be in (0, 1], got {t.lr_decay_gamma}")
        if self.eval.distance not in ("euclidean", "cosine"):
            raise ConfigError(f"eval.distance must be euclidean or cosine, got {self.eval.distance}")
        if not 0 <= self.compare.dropout_rate < 1:
            raise ConfigError("compare.dropout_rate must be in [0, 1)")
        for method in self.compare.methods:
            parse_method(method)
        self.lfm.validate()
        self.attack.validate()
        # the full model config must validate too (catches lfm.N > stem width)
        self.model_config(num_classes=max(2, self.data.train_identities)).validate()

    def model_config(self, num_classes: int) -> MiniResNetConfig:
        m = self.model
        return MiniResNetConfig(
            num_classes=num_classes,
            stem_channels=m.stem_channels,
            stage_widths=tuple(m.stage_widths),
            blocks_per_stage=m.blocks_per_stage,
            embedding_dim=m.embedding_dim,
            lfm_enabled=m.lfm,
            lfm=self.lfm,
            dropout_rate=m.dropout,
            label_smoothing=self.train.label_smoothing,
        )

    def with_value(self, path: str, raw: str) -> "ExperimentConfig":
        """Return a copy with ``section.key`` set from its raw string form."""
        section, key, parser = _resolve_path(path)
        section_obj = getattr(self, section)
        return replace(self, **{section: replace(section_obj, **{key: parser(raw)})})


def parse_method(method: str) -> dict:
    """Parse a comparison method name like ``lfm+cutout+dropout`` into flags."""
    tokens = [t.strip() for t in method.split("+") if t.strip()]
    if not tokens:
        raise ConfigError(f"empty method name {method!r}")
    flags = {"lfm": False, "cutout": False, "dropout": False}
    for tok in tokens:
        if tok == "baseline":
            if len(tokens) > 1:
                raise ConfigError(f"'baseline' cannot be combined in {method!r}")
        elif tok in flags:
            flags[tok] = True
        else:
            raise ConfigError(f"unknown method token {tok!r} in {method!r}")
    return flags


# -- raw value parsers --------------------------------------------------------


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_int(raw: str) -> int:
    try:
        return int(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"expected an integer, got {raw!r}") from exc


def _parse_float(raw: str) -> float:
    try:
        return float(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"expected a number, got {raw!r}") from exc


def _parse_str(raw: str) -> str:
    return raw.strip()


def _parse_int_tuple(raw: str) -> tuple:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(_parse_int(part) for part in raw.split(","))


def _parse_str_tuple(raw: str) -> tuple:
    return tuple(part.strip() for part in raw.split(",") if part.strip())


def _parse_channels(raw: str):
    raw = raw.strip()
    if raw.lower() in ("half", "none"):
        return None
    return _parse_int(raw)


_SECTION_TYPES = {
    "data": DataConfig,
    "model": ModelSection,
    "lfm": LfmConfig,
    "train": TrainConfig,
    "attack": AttackConfig,
    "eval": EvalSection,
    "run": RunConfig,
    "compare": CompareSection,
}

_SPECIAL_PARSERS = {
    ("model", "stage_widths"): _parse_int_tuple,
    ("train", "lr_decay_epochs"): _parse_int_tuple,
    ("lfm", "num_masked_channels"): _parse_channels,
    ("compare", "methods"): _parse_str_tuple,
}

_BASE_PARSERS = {"int": _parse_int, "float": _parse_float, "bool": _parse_bool, "str": _parse_str}


def _field_parser(section: str, key: str):
    special = _SPECIAL_PARSERS.get((section, key))
    if special is not None:
        return special
    cls = _SECTION_TYPES[section]
    for f in fields(cls):
        if f.name == key:
            # field types arrive as strings under deferred annotation evaluation
            name = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
            parser = _BASE_PARSERS.get(name)
            if parser is None:
                raise ConfigError(f"no parser for {section}.{key}")
            return parser
    raise ConfigError(f"unknown key {key!r} in section [{section}]")


def _resolve_path(path: str):
    if path.count(".") != 1:
        raise ConfigError(f"parameter path must look like section.key, got {path!r}")
    section, key = path.split(".")
    if section not in _SECTION_TYPES:
        raise ConfigError(f"unknown section {section!r} in parameter path {path!r}")
    return section, key, _field_parser(section, key)


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    section = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTION_TYPES:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw_line!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        cfg = cfg.with_value(f"{section}.{key}", value.strip())
    return cfg


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base)


@dataclass(frozen=True)
class SweepSpec:
    """One swept parameter: config path, raw value list, seeds per value."""

    param: str
    values: tuple
    seeds: int

    def validate(self) -> None:
        if not self.values:
            raise ConfigError("sweep needs a non-empty value list")
        if self.seeds < 1:
            raise ConfigError(f"sweep needs seeds >= 1, got {self.seeds}")
        _resolve_path(self.param)
