"""
Run configuration: flat `key = value` files with `#` comments, validated
by pydantic. Every problem is reported, not just the first one.
"""
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from core.errors import ConfigError

INPUT_PATH_FIELDS = ("county_csv", "school_csv", "tile_dir", "embeddings_csv")


def _epochs_at_least_one(v: int) -> int:
    if v < 1:
        raise ValueError("epochs ≥ 1")
    return v


def _positive_lr(v: float) -> float:
    # 0 is allowed: a frozen optimiser
    if v < 0:
        raise ValueError("learning_rate ≥ 0")
    return v


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = 1e-4
    epochs: int = 5
    batch_size: int = Field(default=16, ge=1)
    seed: int = 0
    augment: bool = True
    momentum: float = Field(default=0.9, ge=0, lt=1)
    input_size: int = Field(default=64, ge=8)
    channels: Tuple[int, int, int] = (8, 16, 32)
    d_embed: int = Field(default=64, ge=1)

    _check_epochs = field_validator("epochs")(_epochs_at_least_one)
    _check_lr = field_validator("learning_rate")(_positive_lr)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # --- PATHS ---
    county_csv: Optional[Path] = None
    school_csv: Optional[Path] = None
    tile_dir: Optional[Path] = None
    embeddings_csv: Optional[Path] = None
    cache_dir: Path = Path("cache")
    output_dir: Path = Path("out")

    # --- GRID / IMAGERY ---
    zoom: int = Field(default=17, ge=0, le=21)
    tile_size: int = Field(default=400, gt=0)
    workers: int = Field(default=8, ge=1)

    # --- TRAINING ---
    learning_rate: float = 1e-4
    epochs: int = 5
    batch_size: int = Field(default=16, ge=1)
    seed: int = 0
    augment: bool = True
    momentum: float = Field(default=0.9, ge=0, lt=1)
    input_size: int = Field(default=64, ge=8)
    d_embed: int = Field(default=64, ge=1)

    # --- CLUSTERING ---
    k: int = Field(default=10, ge=1)
    neighbors: int = Field(default=15, ge=1)
    sigma: Union[Literal["auto"], float] = "auto"
    ttest_weights: Literal["population", "images"] = "population"

    # --- SHAP ---
    shap_grid: int = Field(default=8, ge=1)
    shap_samples: int = Field(default=512, ge=4)
    shap_tiles: int = Field(default=2, ge=0)
    filters_shown: int = Field(default=4, ge=0)

    # --- SYNTHETIC CORPUS ---
    synth_counties: int = Field(default=60, ge=13)
    synth_null: bool = False

    _check_epochs = field_validator("epochs")(_epochs_at_least_one)
    _check_lr = field_validator("learning_rate")(_positive_lr)

    @field_validator("sigma")
    @classmethod
    def sigma_positive(cls, v):
        if v != "auto" and not v > 0:
            raise ValueError("sigma must be 'auto' or a positive number")
        return v

    @model_validator(mode="after")
    def shap_budget(self):
        if self.shap_samples < 2 * self.shap_grid ** 2 + 2:
            raise ValueError(f"shap_samples must be ≥ 2·shap_grid²+2 = {2 * self.shap_grid ** 2 + 2}")
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, epochs=self.epochs, batch_size=self.batch_size,
                           seed=self.seed, augment=self.augment, momentum=self.momentum,
                           input_size=self.input_size, d_embed=self.d_embed)

    def missing_inputs(self) -> List[str]:
        problems = []
        for name in INPUT_PATH_FIELDS:
            path = getattr(self, name)
            if path is not None and not path.exists():
                problems.append(f"{name}: path does not exist: {path}")
        return problems


# ==========================================
#   FLAT FILE FORMAT
# ==========================================

def parse_config_text(text: str) -> Tuple[Dict[str, str], List[str]]:
    values, errors = {}, []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value', got '{raw.strip()}'")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            errors.append(f"line {lineno}: empty key")
            continue
        if key in values:
            errors.append(f"line {lineno}: duplicate key '{key}'")
            continue
        if not value:
            errors.append(f"line {lineno}: empty value for '{key}'")
            continue
        values[key] = value
    return values, errors


def _format_errors(exc: ValidationError) -> List[str]:
    out = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "config"
        if err["type"] == "extra_forbidden":
            out.append(f"unknown key '{loc}'")
        else:
            out.append(f"{loc}: {err['msg']}")
    return out


def build_config(values: Dict[str, str], errors: Optional[List[str]] = None, check_paths: bool = True) -> RunConfig:
    errors = list(errors or [])
    config = None
    try:
        config = RunConfig(**values)
    except ValidationError as e:
        errors += _format_errors(e)
    if config is not None and check_paths:
        errors += config.missing_inputs()
    if errors:
        raise ConfigError(f"invalid configuration ({len(errors)} problems)", errors)
    return config


def validate_config(path=None, overrides: Optional[Dict[str, str]] = None, check_paths: bool = True) -> RunConfig:
    """Defaults < file < overrides. Raises ConfigError listing every problem."""
    values, errors = {}, []
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}")
        values, errors = parse_config_text(text)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None and v != ""})
    return build_config(values, errors, check_paths=check_paths)


def to_flat_text(config: RunConfig) -> str:
    lines = ["# resolved geomort configuration"]
    for key, value in sorted(config.model_dump().items()):
        if value is None:
            continue
        if isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
