#schemas for finite environments
from typing import Literal, Optional

import numpy as np
from pydantic import Field, field_validator, model_validator

from src.schemas.base import ArraySchema, BaseSchema
from src.schemas.dataset import LaggedDataset

SIMPLEX_TOL = 1e-12


def _check_rows(name: str, table: np.ndarray):
    if np.any(table < 0) or not np.allclose(table.sum(axis=-1), 1.0, atol=SIMPLEX_TOL, rtol=0.0):
        raise ValueError(f"rows of {name} must be probability vectors")


class DiscreteEnv(ArraySchema):
    """Finite lagged bandit: x0 ~ p0, x | x0 ~ p_x_given_x0, a | x ~ pi0, R with mean q[x, x0, a].

    ``features`` (nx, d) and ``lag_features`` (n0, d) are the context vectors a
    sampled dataset exposes; by default both carry the context index.
    """

    p0: np.ndarray
    p_x_given_x0: np.ndarray
    pi0: np.ndarray
    q_table: np.ndarray
    sigma2_table: np.ndarray
    features: Optional[np.ndarray] = None
    lag_features: Optional[np.ndarray] = None

    @field_validator("p0", "p_x_given_x0", "pi0", "q_table", "sigma2_table", "features", "lag_features", mode="before")
    @classmethod
    def as_float_array(cls, value):
        if value is None:
            return None
        return np.array(value, dtype=float)

    @model_validator(mode="after")
    def check_tables(self):
        n0, nx, num_actions = self.p0.shape[0], self.pi0.shape[0], self.pi0.shape[1]
        if self.p_x_given_x0.shape != (n0, nx):
            raise ValueError(f"p_x_given_x0 must have shape ({n0}, {nx})")
        for name in ("q_table", "sigma2_table"):
            if getattr(self, name).shape != (nx, n0, num_actions):
                raise ValueError(f"{name} must have shape ({nx}, {n0}, {num_actions})")
        _check_rows("p0", self.p0)
        _check_rows("p_x_given_x0", self.p_x_given_x0)
        _check_rows("pi0", self.pi0)
        if np.any(self.sigma2_table < 0):
            raise ValueError("reward variances must be nonnegative")
        if self.features is None:
            object.__setattr__(self, "features", np.arange(nx, dtype=float)[:, None])
        d = self.features.shape[1]
        if self.features.shape[0] != nx:
            raise ValueError(f"features must have {nx} rows")
        if self.lag_features is None:
            lag = np.zeros((n0, d))
            lag[:, 0] = np.arange(n0)
            object.__setattr__(self, "lag_features", lag)
        if self.lag_features.shape != (n0, d):
            raise ValueError(f"lag_features must have shape ({n0}, {d})")
        for name in ("p0", "p_x_given_x0", "pi0", "q_table", "sigma2_table", "features", "lag_features"):
            getattr(self, name).setflags(write=False)
        return self

    @property
    def num_lag_contexts(self) -> int:
        return self.p0.shape[0]

    @property
    def num_contexts(self) -> int:
        return self.pi0.shape[0]

    @property
    def num_actions(self) -> int:
        return self.pi0.shape[1]

    @property
    def joint(self) -> np.ndarray:
        """p(x0, x) as an (n0, nx) table."""
        return self.p0[:, None] * self.p_x_given_x0

    @property
    def p_x(self) -> np.ndarray:
        return self.joint.sum(axis=0)

    @property
    def posterior_x0(self) -> np.ndarray:
        """p(x0 | x) as an (nx, n0) table (Bayes); rows for unreachable x are uniform."""
        joint = self.joint.T
        totals = joint.sum(axis=1, keepdims=True)
        uniform = np.full_like(joint, 1.0 / joint.shape[1])
        return np.divide(joint, totals, out=uniform, where=totals > 0)

    def to_dict(self) -> dict:
        return {
            "p0": self.p0.tolist(),
            "p_x_given_x0": self.p_x_given_x0.tolist(),
            "pi0": self.pi0.tolist(),
            "q_table": self.q_table.tolist(),
            "sigma2_table": self.sigma2_table.tolist(),
            "features": self.features.tolist(),
            "lag_features": self.lag_features.tolist(),
        }


class OracleFixture(ArraySchema):
    """A DiscreteEnv with a tabular target policy and a residual shift delta(x0, a)."""

    name: str
    expect: Literal["pass", "bias"] = "pass"
    env: DiscreteEnv
    target: np.ndarray
    delta: np.ndarray

    @field_validator("target", "delta", mode="before")
    @classmethod
    def as_float_array(cls, value):
        return np.array(value, dtype=float)

    @model_validator(mode="after")
    def check_shapes(self):
        if self.target.shape != (self.env.num_contexts, self.env.num_actions):
            raise ValueError("target table must have shape (nx, |A|)")
        _check_rows("target", self.target)
        if self.delta.shape != (self.env.num_lag_contexts, self.env.num_actions):
            raise ValueError("delta must have shape (n0, |A|)")
        return self


class DiscreteDraw(ArraySchema):
    dataset: LaggedDataset
    x_index: np.ndarray
    x0_index: np.ndarray


class CheckResult(BaseSchema):
    fixture: str
    seed: Optional[int] = None
    check: str
    residual: float
    tolerance: float
    expected_fail: bool = False
    passed: bool = Field(default=True)
