"""
Configuration management for the PANIC system.
Supports environment variables, dotted config files and command-line overrides.
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from exceptions import ConfigurationError


class _Section(BaseModel):
    """Base for config sections: unknown keys are typos, not extensions."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ModelConfig(_Section):
    """Architecture of both branches."""

    n_prototypes: int = Field(2, ge=1)
    latent_dim: int = Field(64, ge=1)
    head_channels: int = Field(64, ge=1)
    backbone_widths: List[int] = [8, 16, 32, 64]
    backbone_blocks: List[int] = [2, 2, 2, 2]
    backbone_strides: List[int] = [1, 2, 2, 1]
    stem_stride: int = Field(2, ge=1)
    nam_hidden: List[int] = [32, 32]
    nam_dropout: float = Field(0.4, ge=0.0, lt=1.0)
    output_dropout: float = Field(0.1, ge=0.0, lt=1.0)
    spectral_iterations: int = Field(1, ge=1)
    use_tabular: bool = True
    use_image: bool = True

    @model_validator(mode="after")
    def _check_backbone(self) -> "ModelConfig":
        if not (len(self.backbone_widths) == len(self.backbone_blocks) == len(self.backbone_strides)):
            raise ValueError("backbone_widths, backbone_blocks and backbone_strides must have equal length")
        if not self.use_tabular and not self.use_image:
            raise ValueError("at least one branch must stay enabled")
        return self


class LossWeights(_Section):
    """Weights of the regularizers in the training objective (CE weight is 1)."""

    tab: float = Field(0.01, ge=0.0)
    cluster: float = Field(0.5, ge=0.0)
    separation: float = Field(0.5, ge=0.0)
    occurrence: float = Field(0.5, ge=0.0)
    affine: float = Field(0.5, ge=0.0)


class TrainConfig(_Section):
    """Optimizer, schedule and alternation settings."""

    lr: float = Field(0.002, gt=0.0)
    weight_decay: float = Field(0.0005, ge=0.0)
    lr_floor_ratio: float = Field(0.1, gt=0.0, le=1.0)
    cycle_epochs: int = Field(10, ge=1)
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(16, ge=1)
    alternation_cadence: int = Field(1, ge=1)
    warmup_epochs: int = Field(0, ge=0)
    patience: int = Field(0, ge=0)


class CVConfig(_Section):
    """Cross-validation protocol."""

    n_folds: int = Field(5, ge=2)
    val_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    folds_to_run: Optional[int] = Field(None, ge=1)


class SyntheticSpec(_Section):
    """Synthetic cohort description; defaults mirror the reference cohort statistics."""

    n_subjects: int = Field(600, ge=3)
    class_names: List[str] = ["CN", "Dementia", "MCI"]
    class_proportions: List[float] = [379 / 1245, 256 / 1245, 610 / 1245]
    class_severity: List[float] = [0.0, 2.0, 1.0]
    age_mean: List[float] = [73.5, 74.5, 72.3]
    age_sd: List[float] = [5.9, 7.9, 7.3]
    age_range: List[float] = [55.0, 91.4]
    female_fraction: List[float] = [0.509, 0.406, 0.415]
    education_mean: List[float] = [16.4, 15.4, 16.1]
    education_sd: List[float] = [2.7, 2.8, 2.7]
    mmse_mean: List[float] = [29.0, 23.2, 27.8]
    mmse_sd: List[float] = [1.2, 2.2, 1.7]
    n_continuous: int = Field(9, ge=1)
    n_categorical: int = Field(32, ge=1)
    informative_continuous: int = Field(5, ge=0)
    informative_categorical: int = Field(4, ge=0)
    tabular_effect: float = Field(1.0, ge=0.0)
    allele_effect: float = Field(0.15, ge=0.0)
    volume_shape: List[int] = [32, 32, 32]
    blob_centers: List[List[float]] = [[0.3, 0.3, 0.5], [0.7, 0.5, 0.3], [0.5, 0.7, 0.7]]
    blob_radius: float = Field(3.0, gt=0.0)
    blob_intensity: List[float] = [2.5, 2.5, 2.5]
    blob_jitter: float = Field(0.25, ge=0.0)
    noise_level: float = Field(1.0, ge=0.0)
    noise_smoothing: float = Field(1.5, ge=0.0)
    missing_rate: float = Field(0.05, ge=0.0, lt=1.0)
    include_mmse: bool = False
    seed: int = 0  # generate() seed; the CLI derives it from the root seed

    @field_validator("volume_shape")
    @classmethod
    def _three_dims(cls, value: List[int]) -> List[int]:
        if len(value) != 3 or min(value) < 1:
            raise ValueError("volume_shape needs three positive sizes")
        return value

    @model_validator(mode="after")
    def _check_classes(self) -> "SyntheticSpec":
        n = len(self.class_names)
        per_class = {
            "class_proportions": self.class_proportions,
            "class_severity": self.class_severity,
            "age_mean": self.age_mean,
            "age_sd": self.age_sd,
            "female_fraction": self.female_fraction,
            "education_mean": self.education_mean,
            "education_sd": self.education_sd,
            "mmse_mean": self.mmse_mean,
            "mmse_sd": self.mmse_sd,
            "blob_centers": self.blob_centers,
            "blob_intensity": self.blob_intensity,
        }
        for name, values in per_class.items():
            if len(values) != n:
                raise ValueError(f"{name} needs one entry per class ({n})")
        if abs(sum(self.class_proportions) - 1.0) > 1e-6 or min(self.class_proportions) <= 0:
            raise ValueError("class_proportions must be positive and sum to 1")
        centers = [tuple(c) for c in self.blob_centers]
        if any(len(c) != 3 for c in centers) or len(set(centers)) != n:
            raise ValueError("blob_centers must be distinct 3D points, one per class")
        if self.informative_continuous > self.n_continuous:
            raise ValueError("informative_continuous exceeds n_continuous")
        if self.informative_categorical > self.n_categorical - 1:
            raise ValueError("informative_categorical exceeds the number of variant features")
        return self


class InterpretConfig(_Section):
    """Settings of the explanation artifacts."""

    reference_class: int = Field(0, ge=0)
    reference_label: str = "control"
    threshold: float = Field(0.3, gt=0.0, lt=1.0)
    grid_points: int = Field(101, ge=2)
    top_k: int = Field(10, ge=1)


class RunConfig(_Section):
    """Everything a run needs; serialized into the run directory before execution."""

    seed: int = 0
    data_dir: str = "data/synthetic"
    out_dir: str = "runs/default"
    checkpoint: Optional[str] = None
    subjects: List[str] = []
    model: ModelConfig = ModelConfig()
    loss: LossWeights = LossWeights()
    train: TrainConfig = TrainConfig()
    cv: CVConfig = CVConfig()
    data: SyntheticSpec = SyntheticSpec()
    interpret: InterpretConfig = InterpretConfig()

    @property
    def n_classes(self) -> int:
        return len(self.data.class_names)

    @model_validator(mode="after")
    def _check_reference(self) -> "RunConfig":
        if self.interpret.reference_class >= len(self.data.class_names):
            raise ValueError("interpret.reference_class is not a valid class index")
        return self


class EnvironmentSettings(BaseSettings):
    """Process-level settings read from PANIC_* environment variables."""

    model_config = SettingsConfigDict(env_prefix="PANIC_", env_file=".env", extra="ignore")

    num_threads: Optional[int] = None
    log_level: str = "INFO"
    log_file: Optional[str] = None
    run_acceptance: bool = False


def _parse_value(raw: str) -> Any:
    """Parse a dotted-config value: JSON if possible, plain string otherwise."""
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def set_dotted(target: Dict[str, Any], key: str, value: Any):
    """Assign ``value`` at dotted ``key`` inside a nested dict."""
    parts = key.split(".")
    node = target
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"Config key {key} descends into a scalar", details={"key": key})
    node[parts[-1]] = value


def parse_dotted(text: str) -> Dict[str, Any]:
    """Parse ``a.b = value`` lines (``#`` comments allowed) into a nested dict."""
    result: Dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(
                f"Malformed config line {lineno}: expected 'key = value'",
                details={"line": lineno}
            )
        key, raw = line.split("=", 1)
        set_dotted(result, key.strip(), _parse_value(raw))
    return result


def _flatten(prefix: str, value: Any, out: Dict[str, Any]):
    if isinstance(value, dict):
        for key in value:
            _flatten(f"{prefix}.{key}" if prefix else key, value[key], out)
    else:
        out[prefix] = value


def dump_dotted(run_config: RunConfig) -> str:
    """Serialize a RunConfig to the dotted text format (sorted keys, stable)."""
    flat: Dict[str, Any] = {}
    _flatten("", run_config.model_dump(mode="json"), flat)
    return "".join(f"{key} = {json.dumps(flat[key])}\n" for key in sorted(flat))


def _merge(base: Dict[str, Any], extra: Mapping[str, Any]) -> Dict[str, Any]:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value
    return base


def build_run_config(
    config_path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None
) -> RunConfig:
    """
    Resolve a RunConfig from defaults < config file < dotted overrides.

    Args:
        config_path: Optional dotted-format config file
        overrides: Mapping of dotted key to value (strings are parsed like file values)

    Returns:
        Validated RunConfig
    """
    values: Dict[str, Any] = RunConfig().model_dump(mode="json")
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigurationError(f"Config file not found: {path}", details={"path": str(path)})
        _merge(values, parse_dotted(path.read_text(encoding="utf-8")))
    for key, value in (overrides or {}).items():
        set_dotted(values, key, _parse_value(value) if isinstance(value, str) else value)
    try:
        return RunConfig.model_validate(values)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid configuration: {e}", details={"errors": e.errors()}) from e


# Global environment settings instance
config = EnvironmentSettings()
