"""
Training configuration - pydantic models for the JSON config files.

A config file holds every TrainConfig field plus a `data` block and an
`output_dir`. Unknown keys are rejected; missing keys take their defaults
and each defaulted top-level key is logged as a notice.

Example:
    {
      "topology": "28x28-12c5-2a-64c5-2a-10o",
      "lif": {"v_th": 1.2},
      "i_rate": 100,
      "data": {"format": "mnist",
               "train_images": "${REGEN_SNN_MNIST_DIR}/train-images-idx3-ubyte"}
    }
"""
import json
import logging
import os
from pathlib import Path
from typing import Any, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..engine.errors import ConfigError, TopologyError
from ..engine.layers import parse_topology
from ..engine.models import LearnConfig, LifParams

logger = logging.getLogger(__name__)


class LifConfig(BaseModel):
    """LIF constants; the defaults are the parameter set P2 neuron values."""
    model_config = ConfigDict(extra="forbid")

    tau_rc: float = Field(20.0, gt=0)
    tau_ref: float = Field(1.0, ge=0)
    v_th: float = 1.2
    v_res: float = 0.0
    dt: float = 1.0

    @model_validator(mode="after")
    def _threshold_above_reset(self) -> 'LifConfig':
        if self.dt != 1.0:
            raise ValueError(f"dt is fixed at 1.0 ms, got {self.dt}")
        if not self.v_th > self.v_res:
            raise ValueError(f"v_th ({self.v_th}) must exceed v_res ({self.v_res})")
        return self


class DataConfig(BaseModel):
    """Dataset format and file locations."""
    model_config = ConfigDict(extra="forbid")

    format: Literal["mnist", "cifar10"] = "mnist"
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    train_batches: list[str] = Field(default_factory=list)
    test_batches: list[str] = Field(default_factory=list)


class TrainConfig(BaseModel):
    """Every hyperparameter of a training and evaluation run."""
    model_config = ConfigDict(extra="forbid")

    topology: str = "28x28-12c5-2a-64c5-2a-10o"
    lif: LifConfig = Field(default_factory=LifConfig)
    i_rate: float = Field(100.0, gt=0)
    t_ms: float = Field(250.0, gt=0)
    eta: float = Field(0.001, gt=0)
    presentations: Union[int, list[int]] = 3
    presentation_order: Literal["repeat", "interleaved"] = "repeat"
    update_granularity: Literal["per-step", "per-presentation"] = "per-step"
    grad_clip: Optional[float] = Field(None, gt=0)
    init_gain: float = Field(1.0, gt=0)
    kernel_init: Literal["uniform", "calibrated"] = "calibrated"
    init_drive: float = Field(2.0, gt=0)
    calibration_images: int = Field(10, ge=1)
    readout_init: Literal["uniform", "positive"] = "uniform"
    potential_gate: Literal["signed", "rectified", "magnitude"] = "signed"
    readout_error: Literal["every-step", "spike-events"] = "every-step"
    labeled_subset: int = Field(20000, ge=1)
    target_rate: float = Field(30.0, ge=0)
    readout_eta: float = Field(0.001, gt=0)
    readout_epochs: int = Field(1, ge=1)
    passes: int = Field(2, ge=1)
    iterations: int = Field(5, ge=1)
    seed: int = Field(0, ge=0)
    stack_images: Optional[int] = Field(None, ge=1)
    test_items: Optional[int] = Field(None, ge=1)
    metric_every: int = Field(0, ge=0)
    cache_features: bool = False
    progress: bool = True

    @field_validator("topology")
    @classmethod
    def _topology_parses(cls, value: str) -> str:
        try:
            parse_topology(value)
        except TopologyError as exc:
            raise ValueError(str(exc)) from exc
        return value.strip()

    @field_validator("presentations")
    @classmethod
    def _presentations_positive(cls, value):
        counts = value if isinstance(value, list) else [value]
        if not counts or any(c < 1 for c in counts):
            raise ValueError("presentations must be at least 1")
        return value

    @model_validator(mode="after")
    def _window_and_rates(self) -> 'TrainConfig':
        steps = self.t_ms / self.lif.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError(f"t_ms ({self.t_ms}) must be a multiple of dt ({self.lif.dt})")
        if self.i_rate * self.lif.dt / 1000.0 > 1.0:
            raise ValueError(f"i_rate {self.i_rate} Hz exceeds one spike per step")
        if self.target_rate * self.lif.dt / 1000.0 > 1.0:
            raise ValueError(f"target_rate {self.target_rate} Hz exceeds one spike per step")
        if isinstance(self.presentations, list):
            conv_layers = len(parse_topology(self.topology).conv_indices)
            if len(self.presentations) != conv_layers:
                raise ValueError(
                    f"presentations lists {len(self.presentations)} counts for {conv_layers} conv layers"
                )
        return self

    @property
    def steps(self) -> int:
        return int(round(self.t_ms / self.lif.dt))

    def presentations_for(self, position: int) -> int:
        """Presentation count of the conv layer at `position` (0-based among conv layers)."""
        if isinstance(self.presentations, list):
            return self.presentations[position]
        return self.presentations

    def to_lif_params(self) -> LifParams:
        return LifParams(**self.lif.model_dump())

    def to_learn_config(self, position: int = 0) -> LearnConfig:
        return LearnConfig(
            eta=self.eta,
            update_granularity=self.update_granularity,
            presentations_per_image=self.presentations_for(position),
            grad_clip=self.grad_clip,
            potential_gate=self.potential_gate,
        )


class ConfigFile(TrainConfig):
    """A whole config document: TrainConfig plus data and output locations."""
    data: DataConfig = Field(default_factory=DataConfig)
    output_dir: Optional[str] = None

    def train_config(self) -> TrainConfig:
        return TrainConfig.model_validate(self.model_dump(include=set(TrainConfig.model_fields)))


def _format_errors(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{where}: {err['msg']}")
    return "; ".join(parts)


def parse_config(document: dict[str, Any], source: str = "<config>") -> ConfigFile:
    """Validate a config dict and log a notice for each defaulted key."""
    if not isinstance(document, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    try:
        config = ConfigFile.model_validate(document)
    except ValidationError as exc:
        raise ConfigError(f"{source}: {_format_errors(exc)}") from exc
    for key in ConfigFile.model_fields:
        if key not in config.model_fields_set:
            logger.info("Defaulted config key '%s' = %r", key, getattr(config, key))
    return config


def load_config(path: Union[str, Path]) -> ConfigFile:
    """Read and validate a JSON config file; data paths resolve against its folder."""
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    config = parse_config(document, source=str(path))
    return resolve_paths(config, path.parent)


def _resolve(value: Optional[str], base: Path) -> Optional[str]:
    if value is None:
        return None
    expanded = Path(os.path.expandvars(os.path.expanduser(value)))
    if not expanded.is_absolute():
        expanded = base / expanded
    return str(expanded)


def resolve_paths(config: ConfigFile, base: Path) -> ConfigFile:
    """Expand env vars and make data/output paths absolute against `base`."""
    data = config.data
    resolved = data.model_copy(update={
        "train_images": _resolve(data.train_images, base),
        "train_labels": _resolve(data.train_labels, base),
        "test_images": _resolve(data.test_images, base),
        "test_labels": _resolve(data.test_labels, base),
        "train_batches": [_resolve(p, base) for p in data.train_batches],
        "test_batches": [_resolve(p, base) for p in data.test_batches],
    })
    return config.model_copy(update={"data": resolved, "output_dir": _resolve(config.output_dir, base)})


def apply_overrides(config: ConfigFile, **flags: Any) -> ConfigFile:
    """
    Apply CLI flag values on top of a config (flags win); None means unset.

    Recognized keys: seed, labeled_subset, passes, iterations, output_dir.
    """
    allowed = {"seed", "labeled_subset", "passes", "iterations", "output_dir"}
    unknown = set(flags) - allowed
    if unknown:
        raise ConfigError(f"unknown override(s): {', '.join(sorted(unknown))}")
    update = {k: v for k, v in flags.items() if v is not None}
    if not update:
        return config
    document = config.model_dump()
    document.update(update)
    try:
        overridden = ConfigFile.model_validate(document)
    except ValidationError as exc:
        raise ConfigError(f"flag override rejected: {_format_errors(exc)}") from exc
    for key, value in update.items():
        logger.info("Flag override %s = %r", key, value)
    return overridden


def require_path(value: Optional[str], what: str) -> Path:
    """A configured data path that must exist; missing ones are config errors."""
    if not value:
        raise ConfigError(f"config does not set {what}")
    path = Path(value)
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path
