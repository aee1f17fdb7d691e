#schemas for the synthetic benchmark
import numpy as np
from pydantic import Field, field_validator, model_validator

from src.schemas.base import ArraySchema, BaseSchema
from src.schemas.dataset import LaggedDataset

SEED_BOUND = 2**64


class SynthConfig(BaseSchema):
    n: int = Field(default=1000, ge=2)
    d: int = Field(default=10, ge=4)
    num_actions: int = Field(default=5, ge=1)
    violation_ratio: float = Field(default=0.5, ge=0.0, lt=1.0)
    mix_lambda: float = Field(default=0.5, ge=0.0, le=1.0)
    interaction_eta: float = Field(default=0.0, ge=0.0)
    logging_beta: float = 0.3
    lag_rho: float = Field(default=1.0, ge=0.0)
    target_epsilon: float = Field(default=0.1, ge=0.0, le=1.0)
    env_seed: int = Field(default=0, ge=0, lt=SEED_BOUND)
    data_seed: int = Field(default=0, ge=0, lt=SEED_BOUND)


class SynthEnv(ArraySchema):
    """Environment coefficients; row 0 of g/h carries the fixed baseline contrast."""

    env_seed: int
    g_coef: np.ndarray
    h_coef: np.ndarray
    u_coef: np.ndarray
    count_effect: np.ndarray

    @field_validator("g_coef", "h_coef", "u_coef", "count_effect", mode="before")
    @classmethod
    def as_float_array(cls, value):
        array = np.array(value, dtype=float)
        array.setflags(write=False)
        return array

    @model_validator(mode="after")
    def check_shapes(self):
        if self.g_coef.shape != self.h_coef.shape or self.g_coef.ndim != 2:
            raise ValueError("g and h coefficients must share shape (|A|, d - 1)")
        if self.u_coef.shape != (self.g_coef.shape[0], 3):
            raise ValueError("u coefficients must have shape (|A|, 3)")
        if self.count_effect.shape != (self.g_coef.shape[0],):
            raise ValueError("count effect must have one entry per action")
        return self

    @property
    def num_actions(self) -> int:
        return self.g_coef.shape[0]

    @property
    def d(self) -> int:
        return self.g_coef.shape[1] + 1

    def to_dict(self) -> dict:
        return {
            "env_seed": self.env_seed,
            "g_coef": self.g_coef.tolist(),
            "h_coef": self.h_coef.tolist(),
            "u_coef": self.u_coef.tolist(),
            "count_effect": self.count_effect.tolist(),
        }


class SynthBatch(ArraySchema):
    """A generated dataset with the quantities only a simulator knows."""

    dataset: LaggedDataset
    threshold: float
    mean_rewards: np.ndarray
    logging_probs: np.ndarray
    violation: np.ndarray
