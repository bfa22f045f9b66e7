from __future__ import annotations

import hashlib
import json
import math
import os
import typing as t
from enum import Enum
from pathlib import Path

import pydantic
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from evi_melody.exceptions import ConfigError
from evi_melody.pitchgrid import F_MIN, GRID_SPAN, PitchGrid, TargetMode

load_dotenv()
OUT_DIR_VARNAME = "EVIMELODY_OUT_DIR"
CACHE_DB_VARNAME = "EVIMELODY_CACHE_DB"
DEFAULT_OUT_DIR = Path(os.environ.get(OUT_DIR_VARNAME, "./evimelody_out"))

M = t.TypeVar("M", bound=BaseModel)


class Task(str, Enum):  # noqa: D101
    M1 = "M1"
    M2 = "M2"
    R1 = "R1"
    R2 = "R2"
    BETA_NLL = "beta-nll"
    TCP = "TCP"

    @property
    def target_mode(self) -> TargetMode:  # noqa: D102
        match self:
            case Task.M1 | Task.TCP:
                return TargetMode.CLASS
            case Task.R1:
                return TargetMode.HZ
            case _:
                return TargetMode.CENTS

    @property
    def is_nig(self) -> bool:  # noqa: D102
        return self in {Task.M2, Task.R1, Task.R2}

    @property
    def trains_voicing(self) -> bool:
        """R1 & R2 have no explicit voicing separation, voicing comes from the regressed value."""
        return self not in {Task.R1, Task.R2}

    def head_width(self, n_bins: int) -> int:  # noqa: D102
        match self:
            case Task.M1 | Task.TCP:
                return n_bins
            case Task.BETA_NLL:
                return 2
            case _:
                return 4


class Criterion(str, Enum):  # noqa: D101
    EPISTEMIC = "epistemic"
    ALEATORIC = "aleatoric"
    TCP_CONFIDENCE = "tcp_confidence"
    PREDICTED_VARIANCE = "predicted_variance"
    RANDOM = "random"


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ModelConfig(_Frozen):
    """Frame-wise residual network configuration; defaults are the full-scale model."""

    task: Task = Task.M2
    block_filters: tuple[int, ...] = (32, 64, 128, 256)
    bottleneck_ratio: int = Field(default=4, ge=1)
    dropout_rate: float = Field(default=0.3, ge=0, lt=1)
    weight_decay: float = Field(default=1e-5, ge=0)
    n_bins: int = Field(default=384, ge=2)
    n_freq: int = Field(default=1025, ge=1)
    leaky_slope: float = Field(default=0.01, ge=0)
    pooling: int = Field(default=2, ge=1)
    readout: t.Literal["mean", "flatten"] = "mean"
    seed: int = 0

    @field_validator("block_filters")
    @classmethod
    def _check_filters(cls, filters: tuple[int, ...]) -> tuple[int, ...]:
        if not filters or any(f < 1 for f in filters):
            raise ValueError("block_filters must be a non-empty sequence of positive counts")
        return filters

    @model_validator(mode="after")
    def _check_pooling(self) -> ModelConfig:
        if self.n_freq // self.pooling ** len(self.block_filters) < 1:
            raise ValueError("n_freq is too small for the configured pooling schedule")
        return self

    @classmethod
    def desk(cls, task: Task = Task.M2, **kwargs: t.Any) -> ModelConfig:
        """Desktop-CPU scale: 2 blocks, K = 64 over the same 4 octaves, 257-bin spectrum."""
        params: dict[str, t.Any] = {
            "task": task,
            "block_filters": (8, 16),
            "n_bins": 64,
            "n_freq": 257,
            "readout": "flatten",
        }
        params.update(kwargs)
        return cls(**params)

    @property
    def head_width(self) -> int:  # noqa: D102
        return self.task.head_width(self.n_bins)

    def grid(self) -> PitchGrid:
        """Pitch grid implied by `n_bins`, always spanning the default 4 octaves."""
        return PitchGrid.with_bins(self.n_bins)


class TrainConfig(_Frozen):  # noqa: D101
    epochs: int = Field(default=50, ge=0)
    batch_size: int = Field(default=8, ge=1)
    lr: float = Field(default=1e-3, gt=0)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(default=1e-8, gt=0)
    warmup_epochs: int = Field(default=10, ge=1)
    evidential_weight: float = Field(default=1.0, ge=0)  # w
    nig_coupling: float = Field(default=0.01, ge=0)  # lambda for the NIG regularizer
    beta_nll_beta: float = Field(default=0.5, ge=0, le=1)
    confidence_epochs: int = Field(default=20, ge=0)  # TCP auxiliary head
    seed: int = 0


class FinetuneConfig(_Frozen):  # noqa: D101
    epochs: int = Field(default=20, ge=0)
    batch_size: int = Field(default=8, ge=1)
    lr: float = Field(default=1e-4, gt=0)


class ActiveConfig(_Frozen):  # noqa: D101
    criteria: tuple[Criterion, ...] = (Criterion.EPISTEMIC, Criterion.ALEATORIC, Criterion.RANDOM)
    budgets: tuple[int, ...] = (25, 50, 100, 200)
    seeds: tuple[int, ...] = (1, 2, 3)
    voiced_only: bool = False
    finetune: FinetuneConfig = FinetuneConfig()

    @field_validator("budgets")
    @classmethod
    def _check_budgets(cls, budgets: tuple[int, ...]) -> tuple[int, ...]:
        if any(b < 0 for b in budgets):
            raise ValueError("budgets must be non-negative")
        if list(budgets) != sorted(budgets):
            raise ValueError("budgets must be sorted ascending")
        return budgets


class SyntheticSpec(_Frozen):
    """Generator knobs for one synthetic domain."""

    n_harmonics: int = Field(default=6, ge=1)
    harmonic_decay: float = Field(default=0.6, gt=0, le=1)
    vibrato_depth: float = Field(default=0.0, ge=0)  # cents
    vibrato_rate: float = Field(default=5.5, ge=0)  # Hz
    noise_snr: float = 40.0  # dB
    accompaniment_level: float = Field(default=0.0, ge=0)
    pitch_range: tuple[float, float] = (100.0, 700.0)  # Hz
    voiced_fraction: float = Field(default=0.8, ge=0, le=1)
    note_rate: float = Field(default=2.0, gt=0)  # notes/second

    @field_validator("noise_snr")
    @classmethod
    def _check_snr(cls, snr: float) -> float:
        if not math.isfinite(snr):
            raise ValueError("noise_snr must be finite")
        return snr

    @field_validator("pitch_range")
    @classmethod
    def _check_range(cls, pitch_range: tuple[float, float]) -> tuple[float, float]:
        low, high = pitch_range
        if not low < high:
            raise ValueError("pitch_range must be an increasing (low, high) pair")

        f_max = F_MIN * 2 ** (GRID_SPAN / 1200)
        if low < F_MIN or high > f_max:
            raise ValueError(f"pitch_range must lie within [{F_MIN}, {f_max:.2f}] Hz")
        return pitch_range

    @classmethod
    def source_domain(cls) -> SyntheticSpec:
        """Clean, dark-timbre singing; stands in for the source corpus."""
        return cls()

    @classmethod
    def target_domain(cls) -> SyntheticSpec:
        """Noisy, bright, ornamented singing over a low hum."""
        return cls(
            n_harmonics=10,
            harmonic_decay=0.9,
            vibrato_depth=40.0,
            noise_snr=10.0,
            accompaniment_level=0.3,
        )


class DataSource(_Frozen):
    """A corpus given either as a manifest on disk or as a synthetic spec to generate."""

    manifest: Path | None = None
    synthetic: SyntheticSpec | None = None
    count: int = Field(default=64, ge=1)  # synthetic clips to generate
    seed: int = 0
    ratios: tuple[float, ...] = (0.70, 0.15, 0.15)

    @model_validator(mode="after")
    def _check_source(self) -> DataSource:
        if (self.manifest is None) == (self.synthetic is None):
            raise ValueError("exactly one of 'manifest' or 'synthetic' must be provided")
        if abs(sum(self.ratios) - 1) > 1e-9:
            raise ValueError("ratios must sum to 1")
        return self


class ExperimentConfig(_Frozen):  # noqa: D101
    task: Task = Task.M2
    model: ModelConfig = ModelConfig.desk()
    train: TrainConfig = TrainConfig()
    source: DataSource = DataSource(synthetic=SyntheticSpec.source_domain())
    target: DataSource | None = DataSource(
        synthetic=SyntheticSpec.target_domain(), count=300, seed=1, ratios=(0.8, 0.2)
    )
    active: ActiveConfig = ActiveConfig()
    out_dir: Path = DEFAULT_OUT_DIR

    @model_validator(mode="before")
    @classmethod
    def _sync_task(cls, data: t.Any) -> t.Any:
        """
        Keep the top-level `task` & `model.task` in agreement.

        The top-level `task` is authoritative when given; otherwise it is taken from `model.task`.
        """
        if not isinstance(data, dict):
            return data

        model = data.get("model", ModelConfig.desk())
        if isinstance(model, ModelConfig):
            model = model.model_dump()
        if not isinstance(model, dict):
            return data

        if "task" in data:
            return {**data, "model": {**model, "task": data["task"]}}
        if "task" in model:
            return {**data, "task": model["task"]}
        return data


def _field_names(err: pydantic.ValidationError) -> str:
    return ", ".join(".".join(str(part) for part in e["loc"]) or "<root>" for e in err.errors())


def validated(model_cls: type[M], data: t.Any) -> M:
    """Validate `data` into `model_cls`, converting failures to `ConfigError` naming the fields."""
    try:
        return model_cls.model_validate(data)
    except pydantic.ValidationError as e:
        raise ConfigError(f"Invalid {model_cls.__name__} field(s): {_field_names(e)}\n{e}") from e


def load_json_model(model_cls: type[M], filepath: Path) -> M:
    """Load & validate a JSON config file."""
    try:
        raw = json.loads(filepath.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"Could not decode JSON config '{filepath}': {e}") from e

    return validated(model_cls, raw)


def config_digest(config: BaseModel) -> str:
    """SHA-256 of the canonical (sorted-key) JSON dump of a config model."""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()
