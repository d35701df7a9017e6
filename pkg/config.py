import configparser
from pathlib import Path
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class ConfigError(ValueError):
    """Raised for invalid run configuration (unknown keys, inconsistent model shapes)."""


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", env_file_encoding="utf-8", env_prefix="FFGT_")

    # Logging ----------------------------------------------------------------
    log_level: str = Field(default="INFO", description="Root logging level configured by the CLI.")
    log_format: str = Field(
        default="%(asctime)s - %(levelname)s - %(message)s",
        description="Format string handed to logging.basicConfig.",
    )

    # Execution --------------------------------------------------------------
    jobs: int = Field(
        default=1,
        ge=1,
        description="Default worker count for per-graph parallel work; --jobs overrides it.",
    )
    structure_cache_max_items: int = Field(
        default=1024,
        description="Maximum number of per-graph structures and per-focal-length masks kept in memory.",
    )

    # Paths ------------------------------------------------------------------
    data_dir: str = Field(default="data", description="Default dataset directory for gen/train/ablate.")
    out_dir: str = Field(default="runs", description="Default output directory for reports.")

    # Gradient checking ------------------------------------------------------
    gradcheck_eps: float = Field(default=1e-5, description="Central-difference step.")
    gradcheck_tolerance: float = Field(
        default=1e-4,
        description="Maximum relative error accepted by the gradient checker.",
    )


class SbmPatternParams(BaseModel):
    """Knobs of the SBM-PATTERN generator."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    p: float = Field(0.16, ge=0.0, le=1.0, description="Intra-community link probability.")
    q: float = Field(0.01, ge=0.0, le=1.0, description="Inter-community link probability.")
    p_p: float = Field(0.16, ge=0.0, le=1.0, description="Intra-pattern link probability.")
    q_p: float = Field(0.05, ge=0.0, le=1.0, description="Community-pattern link probability.")
    n_communities: int = Field(5, ge=1)
    community_size_range: tuple[int, int] = (5, 35)
    pattern_size: int = Field(20, ge=1)
    n_patterns: int = Field(100, ge=0)
    feature_vocab: int = Field(3, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    connected_only: bool = Field(True, description="Redraw samples whose graph is disconnected.")
    max_attempts: int = Field(1000, ge=1)

    @field_validator("community_size_range", mode="before")
    @classmethod
    def _parse_range(cls, value: Any) -> Any:
        if isinstance(value, str):
            parts = [part.strip() for part in value.strip("[]() ").split(",") if part.strip()]
            return tuple(int(part) for part in parts)
        return value

    @model_validator(mode="after")
    def _check_range(self) -> "SbmPatternParams":
        lo, hi = self.community_size_range
        if lo < 1 or hi < lo:
            raise ValueError(f"community_size_range must satisfy 1 <= lo <= hi; received {self.community_size_range}")
        return self


class SbmSection(SbmPatternParams):
    n_train: int = Field(2000, ge=1)
    n_val: int = Field(400, ge=1)
    n_test: int = Field(400, ge=1)

    def generator_params(self) -> SbmPatternParams:
        return SbmPatternParams(**self.model_dump(exclude={"n_train", "n_val", "n_test"}))


def parse_fl(value: Any) -> int | None:
    if value is None:
        return None
    if isinstance(value, str):
        stripped = value.strip().lower()
        if stripped in {"", "none", "vanilla", "absent"}:
            return None
        return int(stripped)
    return int(value)


class ModelConfig(BaseModel):
    """Shape of the FFGT model: head split, focal length, bias buckets, input encodings."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    dim: int = Field(32, ge=1)
    layers: int = Field(2, ge=1)
    full_heads: int = Field(2, ge=1)
    focal_heads: int = Field(2, ge=0)
    fl: int | None = Field(1, description="Focal length K; None (or 'vanilla') when focal_heads is 0.")
    mlp_hidden: int | None = Field(None, description="MLP hidden width; defaults to 2 * dim.")
    gate_enabled: bool = False
    max_hop_bucket: int = Field(10, ge=1)
    lap_pe_k: int = Field(8, ge=0)
    virtual_node: bool = False

    @field_validator("fl", mode="before")
    @classmethod
    def _coerce_fl(cls, value: Any) -> int | None:
        return parse_fl(value)

    @model_validator(mode="after")
    def _check_fl(self) -> "ModelConfig":
        if self.fl is not None and self.fl < 0:
            raise ValueError(f"fl must be >= 0; received {self.fl}")
        if self.focal_heads > 0 and self.fl is None:
            raise ValueError("focal_heads > 0 requires a focal length fl")
        return self

    @property
    def heads(self) -> int:
        return self.full_heads + self.focal_heads

    @property
    def head_dim(self) -> int:
        if self.dim % self.heads:
            raise ConfigError(f"dim={self.dim} is not divisible by full_heads + focal_heads = {self.heads}")
        return self.dim // self.heads

    @property
    def hidden(self) -> int:
        return self.mlp_hidden if self.mlp_hidden is not None else 2 * self.dim

    def vanilla(self) -> "ModelConfig":
        """Backbone counterpart: every head full-range, same head width."""
        return ModelConfig.model_validate(
            {**self.model_dump(), "full_heads": self.heads, "focal_heads": 0, "fl": None}
        )

    def with_fl(self, fl: int | None) -> "ModelConfig":
        """Same model with focal length fl; a backbone base is split 1:1 into full and focal heads."""
        if fl is None:
            return self.vanilla()
        update: dict[str, Any] = {"fl": fl}
        if self.focal_heads == 0:
            if self.full_heads < 2:
                raise ConfigError(f"cannot split {self.full_heads} head into full and focal heads for fl={fl}")
            focal = self.full_heads // 2
            update |= {"full_heads": self.full_heads - focal, "focal_heads": focal}
        return ModelConfig.model_validate({**self.model_dump(), **update})


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lr: float = Field(1e-3, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(16, ge=1)
    warmup_epochs: int = Field(0, ge=0)
    class_weighting: bool = True
    eval_every: int = Field(1, ge=1)
    seed: int = Field(0, ge=0)
    ablate_fl: list[int | None] = Field(default_factory=lambda: [None, 1, 2, 3])
    ablate_seeds: list[int] = Field(default_factory=lambda: [0, 1, 2])

    @field_validator("ablate_fl", mode="before")
    @classmethod
    def _parse_fl_list(cls, value: Any) -> Any:
        if isinstance(value, str):
            value = [part for part in value.split(",") if part.strip()]
        return [parse_fl(item) for item in value]

    @field_validator("ablate_seeds", mode="before")
    @classmethod
    def _parse_seeds(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [int(part) for part in value.split(",") if part.strip()]
        return value


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    sbm: SbmSection = Field(default_factory=SbmSection)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)

    def echo(self) -> dict[str, Any]:
        """Effective configuration as plain JSON-compatible data."""
        return self.model_dump(mode="json")

    def with_seed(self, seed: int) -> "RunConfig":
        return self.model_copy(
            update={
                "sbm": self.sbm.model_copy(update={"seed": seed}),
                "train": self.train.model_copy(update={"seed": seed}),
            }
        )


SECTIONS = ("sbm", "model", "train")


def parse_run_config(text: str) -> RunConfig:
    """Parse the `[sbm]` / `[model]` / `[train]` key = value format."""

    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive field names
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"Malformed config file: {e}") from e

    unknown_sections = [name for name in parser.sections() if name not in SECTIONS]
    if unknown_sections:
        raise ConfigError(f"Unknown config section(s): {', '.join(unknown_sections)}")

    raw = {name: dict(parser[name]) for name in parser.sections()}
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        problems = []
        for error in e.errors():
            key = ".".join(str(part) for part in error["loc"])
            if error["type"] == "extra_forbidden":
                problems.append(f"unknown key '{key}'")
            else:
                problems.append(f"{key}: {error['msg']}")
        raise ConfigError("; ".join(problems)) from e


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_run_config(Path(path).read_text(encoding="utf-8"))


def render_run_config(config: RunConfig) -> str:
    """Inverse of parse_run_config for the effective configuration."""

    lines: list[str] = []
    for section, values in config.echo().items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            if isinstance(value, list):
                value = ",".join("vanilla" if item is None else str(item) for item in value)
            elif value is None:
                if key != "fl":
                    continue
                value = "vanilla"
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


settings = Settings()
