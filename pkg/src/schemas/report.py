from typing import Optional

import numpy as np
from pydantic import Field, field_validator, model_validator

from src.schemas.base import ArraySchema, BaseSchema


class InfluenceVector(ArraySchema):
    """Per-sample influence contributions, centered by the reported estimate."""

    values: np.ndarray

    @field_validator("values", mode="before")
    @classmethod
    def as_float_array(cls, value):
        return np.array(value, dtype=float).ravel()

    @property
    def n(self) -> int:
        return self.values.shape[0]


class EstimateReport(BaseSchema):
    estimator_name: str
    value: float
    se: float = Field(ge=0.0)
    ci_low: float
    ci_high: float
    ess: float = Field(gt=0.0)
    per_lag_values: list[float] = Field(default_factory=list)
    lag_weights_alpha: list[float] = Field(default_factory=list)
    n: Optional[int] = None

    @model_validator(mode="after")
    def check_interval(self):
        if not self.ci_low <= self.value <= self.ci_high:
            raise ValueError("confidence interval must contain the point estimate")
        if self.n is not None and self.ess > self.n * (1.0 + 1e-9):
            raise ValueError(f"ess {self.ess} exceeds sample size {self.n}")
        if self.lag_weights_alpha and abs(sum(self.lag_weights_alpha) - 1.0) > 1e-9:
            raise ValueError("lag weights must sum to 1")
        return self

    def covers(self, truth: float) -> bool:
        return self.ci_low <= truth <= self.ci_high

    def to_row(self, num_lags: Optional[int] = None) -> dict:
        row = {
            "estimator": self.estimator_name,
            "value": self.value,
            "se": self.se,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "ess": self.ess,
        }
        count = num_lags if num_lags is not None else len(self.lag_weights_alpha)
        for k in range(count):
            alpha = self.lag_weights_alpha[k] if k < len(self.lag_weights_alpha) else float("nan")
            row[f"alpha_{k + 1}"] = alpha
        return row


class EstimateResult(ArraySchema):
    """A report together with the influence vector it was computed from."""

    report: EstimateReport
    influence: InfluenceVector
    weights: Optional[np.ndarray] = None
