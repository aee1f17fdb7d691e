from typing import Optional, Sequence

import numpy as np
from pydantic import Field, field_validator, model_validator

from src.schemas.base import ArraySchema, BaseSchema


class LaggedSample(BaseSchema):
    x: tuple[float, ...]
    x_lags: tuple[tuple[float, ...], ...] = ()
    a: int = Field(ge=0)
    r: float
    logged_propensity: Optional[float] = Field(default=None, gt=0.0, le=1.0)

    @model_validator(mode="after")
    def check_lag_lengths(self):
        for k, lag in enumerate(self.x_lags):
            if len(lag) != len(self.x):
                raise ValueError(f"lag {k} has length {len(lag)}, expected {len(self.x)}")
        return self


class LaggedDataset(ArraySchema):
    """Logged interactions stored column-wise.

    ``x`` is (n, d), ``x_lags`` is (n, K, d) with K possibly 0, ``propensities``
    holds the logged pi_0(A|X) with NaN where unknown, or is None.
    """

    x: np.ndarray
    x_lags: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    num_actions: int = Field(ge=1)
    propensities: Optional[np.ndarray] = None
    lag_labels: list[str] = Field(default_factory=list)

    @field_validator("x", "x_lags", "rewards", "propensities", mode="before")
    @classmethod
    def as_float_array(cls, value):
        if value is None:
            return None
        return np.array(value, dtype=float)

    @field_validator("actions", mode="before")
    @classmethod
    def as_int_array(cls, value):
        array = np.asarray(value)
        if array.size and not np.all(np.equal(np.mod(array, 1), 0)):
            raise ValueError("actions must be integer indices")
        return np.array(array, dtype=np.int64)

    @model_validator(mode="after")
    def check_consistency(self):
        if self.x.ndim != 2 or self.x.shape[0] == 0:
            raise ValueError("dataset must be nonempty with x of shape (n, d)")
        n, d = self.x.shape
        if self.x_lags.size == 0 and self.x_lags.ndim != 3:
            object.__setattr__(self, "x_lags", np.zeros((n, 0, d)))
        if self.x_lags.ndim != 3 or self.x_lags.shape[0] != n or self.x_lags.shape[2] != d:
            raise ValueError(f"x_lags must have shape ({n}, K, {d}), got {self.x_lags.shape}")
        if self.actions.shape != (n,) or self.rewards.shape != (n,):
            raise ValueError("actions and rewards must have one entry per sample")
        if self.actions.min() < 0 or self.actions.max() >= self.num_actions:
            raise ValueError(f"actions must lie in [0, {self.num_actions})")
        if self.propensities is not None:
            if self.propensities.shape != (n,):
                raise ValueError("propensities must have one entry per sample")
            known = self.propensities[~np.isnan(self.propensities)]
            if np.any(known <= 0.0) or np.any(known > 1.0):
                raise ValueError("logged propensities must lie in (0, 1]")
        num_lags = self.x_lags.shape[1]
        if not self.lag_labels:
            object.__setattr__(self, "lag_labels", [str(k + 1) for k in range(num_lags)])
        if len(self.lag_labels) != num_lags:
            raise ValueError(f"expected {num_lags} lag labels, got {len(self.lag_labels)}")
        for array in (self.x, self.x_lags, self.actions, self.rewards, self.propensities):
            if array is not None:
                array.setflags(write=False)
        return self

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def num_lags(self) -> int:
        return self.x_lags.shape[1]

    @property
    def has_propensities(self) -> bool:
        return self.propensities is not None and not np.any(np.isnan(self.propensities))

    def lag(self, k: int) -> np.ndarray:
        return self.x_lags[:, k, :]

    @property
    def samples(self) -> list[LaggedSample]:
        out = []
        for i in range(self.n):
            propensity = None
            if self.propensities is not None and not np.isnan(self.propensities[i]):
                propensity = float(self.propensities[i])
            out.append(
                LaggedSample(
                    x=tuple(self.x[i].tolist()),
                    x_lags=tuple(tuple(lag.tolist()) for lag in self.x_lags[i]),
                    a=int(self.actions[i]),
                    r=float(self.rewards[i]),
                    logged_propensity=propensity,
                )
            )
        return out

    @classmethod
    def from_samples(
        cls,
        samples: Sequence[LaggedSample],
        num_actions: int,
        lag_labels: Optional[list[str]] = None,
    ) -> "LaggedDataset":
        if not samples:
            raise ValueError("dataset must be nonempty")
        d = len(samples[0].x)
        num_lags = len(samples[0].x_lags)
        for i, sample in enumerate(samples):
            if len(sample.x) != d or len(sample.x_lags) != num_lags:
                raise ValueError(f"sample {i} is inconsistent with d={d}, K={num_lags}")
        propensities = None
        if any(s.logged_propensity is not None for s in samples):
            propensities = [np.nan if s.logged_propensity is None else s.logged_propensity for s in samples]
        return cls(
            x=[s.x for s in samples],
            x_lags=np.array([s.x_lags for s in samples], dtype=float).reshape(len(samples), num_lags, d),
            actions=[s.a for s in samples],
            rewards=[s.r for s in samples],
            num_actions=num_actions,
            propensities=propensities,
            lag_labels=lag_labels or [],
        )

    def without_lags(self) -> "LaggedDataset":
        return LaggedDataset(
            x=self.x,
            x_lags=np.zeros((self.n, 0, self.d)),
            actions=self.actions,
            rewards=self.rewards,
            num_actions=self.num_actions,
            propensities=self.propensities,
        )


class FoldAssignment(ArraySchema):
    fold_of: np.ndarray
    num_folds: int = Field(ge=2)

    @field_validator("fold_of", mode="before")
    @classmethod
    def as_int_array(cls, value):
        return np.array(value, dtype=np.int64)

    @model_validator(mode="after")
    def check_balanced(self):
        sizes = np.bincount(self.fold_of, minlength=self.num_folds)
        if sizes.shape[0] != self.num_folds or np.any(sizes == 0):
            raise ValueError("every fold must be nonempty")
        if sizes.max() - sizes.min() > 1:
            raise ValueError("fold sizes must differ by at most 1")
        self.fold_of.setflags(write=False)
        return self

    @property
    def n(self) -> int:
        return self.fold_of.shape[0]

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != fold)

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == fold)
