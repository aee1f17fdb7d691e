#schemas for experiment configuration
from typing import Literal

from pydantic import Field, field_validator, model_validator

from src.schemas.base import BaseSchema
from src.schemas.synth import SynthConfig

EstimatorName = Literal["dm", "ips", "dr", "dolce", "dolce_mtri"]
GradientEstimatorName = Literal["ips", "dr", "dolce"]
SweepVariable = Literal["violation_ratio", "mix_lambda", "num_actions", "n", "interaction_eta"]

SWEEP_ALIASES = {"r": "violation_ratio", "lambda": "mix_lambda", "eta": "interaction_eta"}
INTEGER_SWEEPS = {"num_actions", "n"}
DEFAULT_GRID = [round(0.1 * i, 1) for i in range(10)]


class NuisanceConfig(BaseSchema):
    k_folds: int = Field(default=2, ge=2)
    reg: float = Field(default=1e-2, gt=0.0)
    logit_reg: float = Field(default=1e-2, gt=0.0)
    p_min: float = Field(default=1e-3, gt=0.0, lt=1.0)
    clip: float = Field(default=20.0, gt=0.0)
    tau: float = Field(default=0.1, gt=0.0)
    mtri_penalty: float = Field(default=1.0, ge=0.0)
    gram_ridge: float = Field(default=1e-6, gt=0.0)
    level: float = Field(default=0.95, gt=0.0, lt=1.0)
    max_iter: int = Field(default=500, ge=1)
    use_mtri: bool = False


class TrainConfig(BaseSchema):
    steps: int = Field(default=200, ge=1)
    step_size: float = Field(default=0.05, ge=0.0)
    exploration_floor: float = Field(default=0.05, ge=0.0, lt=1.0)
    init_seed: int = Field(default=0, ge=0)
    init_scale: float = Field(default=0.1, ge=0.0)
    estimator: GradientEstimatorName = "dolce"
    refit_every: int = Field(default=1, ge=1)
    use_mtri: bool = False


class SweepConfig(BaseSchema):
    sweep_var: SweepVariable = "violation_ratio"
    grid: list[float] = Field(default_factory=lambda: list(DEFAULT_GRID), min_length=1)
    replications: int = Field(default=100, ge=1)
    estimators: list[EstimatorName] = Field(default_factory=lambda: ["dm", "ips", "dr", "dolce"], min_length=1)
    truth_samples: int = Field(default=200_000, ge=1)
    test_samples: int = Field(default=10_000, ge=1)
    jobs: int = Field(default=1, ge=1)
    output_dir: str = "results"

    @field_validator("sweep_var", mode="before")
    @classmethod
    def resolve_alias(cls, value):
        return SWEEP_ALIASES.get(value, value)


class ExperimentConfig(BaseSchema):
    synth: SynthConfig = Field(default_factory=SynthConfig)
    nuisance: NuisanceConfig = Field(default_factory=NuisanceConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    @model_validator(mode="after")
    def check_sweep_values(self):
        if self.sweep.sweep_var in INTEGER_SWEEPS:
            if any(value != int(value) for value in self.sweep.grid):
                raise ValueError(f"grid values for '{self.sweep.sweep_var}' must be integers")
        return self

    def synth_at(self, value: float) -> SynthConfig:
        """Base synthetic config with the sweep variable set to one grid value."""
        name = self.sweep.sweep_var
        cast = int(value) if name in INTEGER_SWEEPS else float(value)
        return SynthConfig(**{**self.synth.model_dump(), name: cast})
