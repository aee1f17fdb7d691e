#ridge.py
from typing import Optional

import numpy as np
from pydantic import Field, field_validator
from scipy import linalg

from src.exceptions.custom_exceptions import InvalidInputException, NumericException
from src.schemas.base import ArraySchema


class RidgeModel(ArraySchema):
    """Linear model y ~ X w + b fitted with an unpenalized intercept.

    ``weights`` is (p,) for a scalar target or (p, t) for t targets sharing the
    same features; ``intercept`` is a float or (t,).
    """

    weights: np.ndarray
    intercept: np.ndarray
    reg: float = Field(gt=0.0)

    @field_validator("weights", "intercept", mode="before")
    @classmethod
    def as_float_array(cls, value):
        array = np.array(value, dtype=float)
        if not np.all(np.isfinite(array)):
            raise ValueError("ridge coefficients must be finite")
        array.setflags(write=False)
        return array

    def predict(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        return features @ self.weights + self.intercept


def solve_penalized_normal_equations(
    design: np.ndarray,
    targets: np.ndarray,
    reg: float,
    extra_gram: Optional[np.ndarray] = None,
    extra_rhs: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Solve (Z'Z + reg D + extra_gram) beta = Z'y + extra_rhs with Z = [1, X].

    D penalizes every column except the leading intercept column.
    """
    ones = np.ones((design.shape[0], 1))
    augmented = np.hstack([ones, design])
    gram = augmented.T @ augmented
    penalty = np.full(augmented.shape[1], reg)
    penalty[0] = 0.0
    gram[np.diag_indices_from(gram)] += penalty
    rhs = augmented.T @ targets
    if extra_gram is not None:
        gram = gram + extra_gram
    if extra_rhs is not None:
        rhs = rhs + extra_rhs
    try:
        beta = linalg.solve(gram, rhs, assume_a="sym")
    except (linalg.LinAlgError, ValueError) as e:
        raise NumericException(f"ridge normal equations are singular: {e}") from e
    if not np.all(np.isfinite(beta)):
        raise NumericException("ridge solution is not finite")
    return beta


def fit_ridge(features: np.ndarray, targets: np.ndarray, reg: float) -> RidgeModel:
    features = np.asarray(features, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if features.ndim != 2 or features.shape[0] < 1:
        raise InvalidInputException("ridge features must be a nonempty matrix")
    if targets.shape[0] != features.shape[0]:
        raise InvalidInputException(
            f"ridge targets have {targets.shape[0]} rows, features have {features.shape[0]}"
        )
    if reg <= 0:
        raise InvalidInputException(f"ridge regularization must be positive, got {reg}")
    beta = solve_penalized_normal_equations(features, targets, reg)
    return RidgeModel(weights=beta[1:], intercept=beta[0], reg=reg)
