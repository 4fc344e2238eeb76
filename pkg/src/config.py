# src/config.py
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import typing
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Mapping, Optional, Tuple

from .errors import ConfigError

VARIANTS = ("baseline", "quad", "advdiff")
SECTIONS = ("model", "train", "data", "eval")
CACHE_DIR_ENV = "NOWCAST_CACHE_DIR"


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "baseline"
    k: Optional[int] = None              # derivative order bound; None -> 7 for baseline, 3 otherwise
    latent_channels: int = 64            # C_h
    encoder_width: int = 32              # channels after the first stride-2 block
    tau_in: int = 4
    tau_out: int = 6
    delta_minutes: int = 10
    icloss_enabled: bool = False
    convlstm_widths: Tuple[int, ...] = (128, 128, 64)
    residual_enabled: bool = True        # False -> PhyCell-only model
    use_norm: bool = True                # group normalization over the derivative terms
    severe_threshold_dbz: float = 40.0
    class_weight: float = 5.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"model.variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.k is None:
            object.__setattr__(self, "k", 7 if self.variant == "baseline" else 3)
        if self.k < 3 or self.k % 2 == 0:
            raise ConfigError(f"model.k must be odd and >= 3, got {self.k}")
        if self.variant in ("quad", "advdiff") and self.k != 3:
            raise ConfigError(f"model.variant={self.variant} requires model.k=3, got {self.k}")
        if self.tau_in < 1 or self.tau_out < 1:
            raise ConfigError(f"model.tau_in and model.tau_out must be >= 1, got {self.tau_in}, {self.tau_out}")
        if self.latent_channels < 1 or self.encoder_width < 1:
            raise ConfigError("model.latent_channels and model.encoder_width must be positive")
        if self.delta_minutes < 1:
            raise ConfigError(f"model.delta_minutes must be positive, got {self.delta_minutes}")
        if not self.convlstm_widths or any(w < 1 for w in self.convlstm_widths):
            raise ConfigError(f"model.convlstm_widths must be non-empty and positive, got {self.convlstm_widths}")
        if not 0 < self.severe_threshold_dbz <= 60:
            raise ConfigError(f"model.severe_threshold_dbz must be in (0, 60], got {self.severe_threshold_dbz}")
        if self.class_weight <= 0:
            raise ConfigError(f"model.class_weight must be positive, got {self.class_weight}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    lambda_moment: float = 1.0
    teacher_forcing: bool = False        # ablation only; rollout feeds back predictions by default
    max_samples: int = 0                 # 0 -> every sample of the split
    device: str = "cpu"
    out_dir: str = "runs/train"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"train.learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"train.epochs and train.batch_size must be >= 1, got {self.epochs}, {self.batch_size}")
        if self.lambda_moment < 0:
            raise ConfigError(f"train.lambda_moment must be >= 0, got {self.lambda_moment}")
        if self.max_samples < 0:
            raise ConfigError(f"train.max_samples must be >= 0, got {self.max_samples}")


@dataclass(frozen=True)
class DataConfig:
    data_dir: str = "data/synth"
    ratios: Tuple[float, ...] = (0.72, 0.127, 0.153)   # train / validation / test situations
    seed: int = 0

    # Synthetic advection generator
    grid: int = 64
    steps: int = 500                     # frames per situation
    velocity: Tuple[float, ...] = (1.0, 0.0)   # px per 10-min step along (x, y)
    diffusion: float = 0.0               # px^2 per step
    noise: float = 0.0
    blobs: int = 3
    situations: int = 1
    gap_hours: float = 24.0              # dry gap inserted between synthetic situations
    start: str = "2020-01-01T00:00"

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ConfigError(f"data.ratios must be three non-negative numbers, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-6:
            raise ConfigError(f"data.ratios must sum to 1, got {sum(self.ratios)}")
        if self.grid < 4 or self.grid % 4 != 0:
            raise ConfigError(f"data.grid must be a positive multiple of 4, got {self.grid}")
        if self.steps < 1 or self.blobs < 1 or self.situations < 1:
            raise ConfigError("data.steps, data.blobs and data.situations must be >= 1")
        if len(self.velocity) != 2:
            raise ConfigError(f"data.velocity must have two components, got {self.velocity}")
        if self.diffusion < 0 or self.noise < 0:
            raise ConfigError("data.diffusion and data.noise must be >= 0")
        if self.situations > 1 and self.gap_hours < 24:
            raise ConfigError(f"data.gap_hours must be >= 24 to separate situations, got {self.gap_hours}")


@dataclass(frozen=True)
class EvalConfig:
    thresholds_dbz: Tuple[float, ...] = (8.0, 40.0)
    split: str = "test"
    lead_times: int = 0                  # 0 -> model.tau_out
    baseline: str = ""                   # "persistence" adds a relative-change table
    arrow_stride: int = 2
    out_dir: str = "runs/eval"

    def __post_init__(self):
        if not self.thresholds_dbz or any(not 0 < t <= 60 for t in self.thresholds_dbz):
            raise ConfigError(f"eval.thresholds_dbz must lie in (0, 60], got {self.thresholds_dbz}")
        if self.split not in ("train", "validation", "test"):
            raise ConfigError(f"eval.split must be train, validation or test, got {self.split!r}")
        if self.lead_times < 0 or self.arrow_stride < 1:
            raise ConfigError("eval.lead_times must be >= 0 and eval.arrow_stride >= 1")
        if self.baseline not in ("", "persistence"):
            raise ConfigError(f"eval.baseline must be empty or 'persistence', got {self.baseline!r}")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, raw: Mapping[str, Mapping[str, Any]]) -> "RunConfig":
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"Unknown config sections: {sorted(unknown)}")
        return cls(
            model=build_section(ModelConfig, raw.get("model", {})),
            train=build_section(TrainConfig, raw.get("train", {})),
            data=build_section(DataConfig, raw.get("data", {})),
            eval=build_section(EvalConfig, raw.get("eval", {})),
        )


_SECTION_TYPES = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "eval": EvalConfig}


def _coerce(value: Any, annotation: Any, key: str) -> Any:
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)

    if origin is typing.Union:  # Optional[...]
        if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none", "null")):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(value, inner, key)

    if origin is tuple:
        items = value.split(",") if isinstance(value, str) else list(value)
        return tuple(_coerce(v, args[0], key) for v in items if not (isinstance(v, str) and not v.strip()))

    try:
        if annotation is bool:
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered in ("1", "true", "yes", "on"):
                    return True
                if lowered in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if annotation is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if annotation is float:
            return float(value)
        if annotation is str:
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"Invalid value for {key}: {value!r} (expected {annotation.__name__})") from None
    return value


def build_section(cls, raw: Mapping[str, Any]):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    section = next(s for s, c in _SECTION_TYPES.items() if c is cls)
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"Unknown keys in [{section}]: {sorted(unknown)}")
    kwargs = {name: _coerce(value, hints[name], f"{section}.{name}") for name, value in raw.items()}
    return cls(**kwargs)


def parse_overrides(pairs: Mapping[str, Any]) -> Dict[str, Dict[str, Any]]:
    """Turns {"model.k": "3"} into {"model": {"k": "3"}}."""
    nested: Dict[str, Dict[str, Any]] = {}
    for dotted, value in pairs.items():
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(f"Override keys take the form section.key with section in {SECTIONS}, got {dotted!r}")
        nested.setdefault(section, {})[key] = value
    return nested


def load_settings(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    raw: Dict[str, Dict[str, Any]] = {}
    if path:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"Config file {path} is not valid TOML: {exc}") from None

    for section, values in parse_overrides(overrides or {}).items():
        raw.setdefault(section, {}).update(values)

    return RunConfig.from_dict(raw)


def cache_dir() -> Optional[str]:
    path = os.getenv(CACHE_DIR_ENV, "").strip()
    return path or None
