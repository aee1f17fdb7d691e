#policy.py
from typing import Annotated, Callable, Literal, Optional, Union

import numpy as np
from pydantic import Field, TypeAdapter, field_validator, model_validator
from scipy.special import softmax

from src.exceptions.custom_exceptions import InvalidInputException, UnsupportedPolicyException
from src.schemas.base import ArraySchema

ScoreFunction = Callable[[np.ndarray], np.ndarray]


def _as_batch(x: np.ndarray, d: Optional[int]) -> np.ndarray:
    batch = np.asarray(x, dtype=float)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.ndim != 2:
        raise InvalidInputException(f"contexts must be a vector or a matrix, got shape {batch.shape}")
    if d is not None and batch.shape[1] != d:
        raise InvalidInputException(f"context dimension {batch.shape[1]} does not match policy dimension {d}")
    return batch


def _with_intercept(x: np.ndarray) -> np.ndarray:
    return np.hstack([x, np.ones((x.shape[0], 1))])


class UniformPolicy(ArraySchema):
    kind: Literal["uniform"] = "uniform"
    num_actions: int = Field(ge=1)
    d: Optional[int] = None

    def probs(self, x: np.ndarray) -> np.ndarray:
        batch = _as_batch(x, self.d)
        return np.full((batch.shape[0], self.num_actions), 1.0 / self.num_actions)


class EpsGreedyScoresPolicy(ArraySchema):
    """Puts 1 - eps + eps/|A| on the best-scoring action (lowest index on ties).

    Scores come from ``score_fn`` (n x d -> n x |A|) or, when loaded from a spec
    file, from linear ``score_weights`` over the context with an intercept.
    """

    kind: Literal["eps_greedy"] = "eps_greedy"
    num_actions: int = Field(ge=1)
    epsilon: float = Field(default=0.1, ge=0.0, le=1.0)
    d: Optional[int] = None
    score_fn: Optional[ScoreFunction] = Field(default=None, exclude=True)
    score_weights: Optional[np.ndarray] = None

    @field_validator("score_weights", mode="before")
    @classmethod
    def as_float_array(cls, value):
        return None if value is None else np.array(value, dtype=float)

    @model_validator(mode="after")
    def check_scores(self):
        if (self.score_fn is None) == (self.score_weights is None):
            raise ValueError("exactly one of score_fn or score_weights must be given")
        if self.score_weights is not None:
            if self.score_weights.ndim != 2 or self.score_weights.shape[0] != self.num_actions:
                raise ValueError("score_weights must have shape (|A|, d + 1)")
            if self.d is None:
                object.__setattr__(self, "d", self.score_weights.shape[1] - 1)
        return self

    def scores(self, x: np.ndarray) -> np.ndarray:
        batch = _as_batch(x, self.d)
        if self.score_fn is not None:
            return np.asarray(self.score_fn(batch), dtype=float)
        return _with_intercept(batch) @ self.score_weights.T

    def probs(self, x: np.ndarray) -> np.ndarray:
        scores = self.scores(x)
        best = np.argmax(scores, axis=1)
        out = np.full(scores.shape, self.epsilon / self.num_actions)
        out[np.arange(scores.shape[0]), best] += 1.0 - self.epsilon
        return out


class LinearSoftmaxPolicy(ArraySchema):
    """pi_theta(a|x) proportional to exp(theta_a . [x, 1])."""

    kind: Literal["linear_softmax"] = "linear_softmax"
    theta: np.ndarray

    @field_validator("theta", mode="before")
    @classmethod
    def as_float_matrix(cls, value):
        theta = np.array(value, dtype=float)
        if theta.ndim != 2 or theta.shape[1] < 1:
            raise ValueError("theta must have shape (|A|, d + 1)")
        theta.setflags(write=False)
        return theta

    @property
    def num_actions(self) -> int:
        return self.theta.shape[0]

    @property
    def d(self) -> int:
        return self.theta.shape[1] - 1

    @property
    def num_params(self) -> int:
        return self.theta.size

    def with_theta(self, theta: np.ndarray) -> "LinearSoftmaxPolicy":
        return LinearSoftmaxPolicy(theta=np.reshape(theta, self.theta.shape))

    def probs(self, x: np.ndarray) -> np.ndarray:
        batch = _as_batch(x, self.d)
        return softmax(_with_intercept(batch) @ self.theta.T, axis=1)

    def scores(self, x: np.ndarray) -> np.ndarray:
        """Score tensor of shape (n, |A|, |A| * (d + 1)); entry [i, a] is grad log pi(a|x_i)."""
        batch = _as_batch(x, self.d)
        features = _with_intercept(batch)
        probs = softmax(features @ self.theta.T, axis=1)
        indicator = np.eye(self.num_actions)[None, :, :]
        coefficient = indicator - probs[:, None, :]
        blocks = coefficient[:, :, :, None] * features[:, None, None, :]
        return blocks.reshape(batch.shape[0], self.num_actions, self.num_params)


class TabularPolicy(ArraySchema):
    """Probability table over finite contexts; x[0] holds the context index."""

    kind: Literal["tabular"] = "tabular"
    table: np.ndarray

    @field_validator("table", mode="before")
    @classmethod
    def as_stochastic_matrix(cls, value):
        table = np.array(value, dtype=float)
        if table.ndim != 2:
            raise ValueError("table must have shape (contexts, |A|)")
        if np.any(table < 0) or not np.allclose(table.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("every table row must be a probability vector")
        table.setflags(write=False)
        return table

    @property
    def num_actions(self) -> int:
        return self.table.shape[1]

    @property
    def d(self) -> int:
        return 1

    def probs(self, x: np.ndarray) -> np.ndarray:
        batch = _as_batch(x, 1)
        index = batch[:, 0].astype(np.int64)
        if np.any(index < 0) or np.any(index >= self.table.shape[0]):
            raise InvalidInputException("context index outside the tabular policy")
        return self.table[index]


Policy = Union[UniformPolicy, EpsGreedyScoresPolicy, LinearSoftmaxPolicy, TabularPolicy]

policy_adapter = TypeAdapter(Annotated[Policy, Field(discriminator="kind")])


def policy_prob(policy: Policy, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InvalidInputException("policy_prob expects a single context vector")
    return policy.probs(x[None, :])[0]


def policy_score(policy: Policy, x: np.ndarray, a: int) -> np.ndarray:
    if not isinstance(policy, LinearSoftmaxPolicy):
        raise UnsupportedPolicyException(f"policy '{policy.kind}' has no parameter score")
    if not 0 <= a < policy.num_actions:
        raise InvalidInputException(f"action {a} outside [0, {policy.num_actions})")
    x = np.asarray(x, dtype=float)
    return policy.scores(x[None, :])[0, a]
