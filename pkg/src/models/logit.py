#logit.py
import logging

import numpy as np
from pydantic import Field, field_validator
from scipy.optimize import minimize
from scipy.special import log_softmax, softmax

from src.exceptions.custom_exceptions import ConvergenceException, InvalidInputException
from src.schemas.base import ArraySchema

logger = logging.getLogger(__name__)

INTERCEPT_REG = 1e-6
SOFT_GRAD_TOL = 1e-4


def floor_simplex(probs: np.ndarray, p_min: float) -> np.ndarray:
    """Clip rows at zero, renormalize, then floor every entry at p_min.

    The floor is applied as p_min + (1 - |A| p_min) p so rows stay on the simplex.
    """
    probs = np.clip(np.asarray(probs, dtype=float), 0.0, None)
    num_actions = probs.shape[-1]
    if num_actions * p_min >= 1.0:
        raise InvalidInputException(f"p_min={p_min} is too large for {num_actions} actions")
    totals = probs.sum(axis=-1, keepdims=True)
    uniform = np.full_like(probs, 1.0 / num_actions)
    normalized = np.divide(probs, totals, out=uniform, where=totals > 0)
    return p_min + (1.0 - num_actions * p_min) * normalized


class MultinomialLogitModel(ArraySchema):
    """P(A=a | z) as a softmax over standardized features with intercepts."""

    theta: np.ndarray
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    reg: float = Field(gt=0.0)
    p_min: float = Field(ge=0.0)
    fitted: bool = True
    grad_norm: float = 0.0

    @field_validator("theta", "feature_mean", "feature_scale", mode="before")
    @classmethod
    def as_float_array(cls, value):
        array = np.array(value, dtype=float)
        array.setflags(write=False)
        return array

    @property
    def num_actions(self) -> int:
        return self.theta.shape[0]

    def _design(self, features: np.ndarray) -> np.ndarray:
        z = (np.asarray(features, dtype=float) - self.feature_mean) / self.feature_scale
        return np.hstack([z, np.ones((z.shape[0], 1))])

    def predict_raw(self, features: np.ndarray) -> np.ndarray:
        return softmax(self._design(features) @ self.theta.T, axis=1)

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return floor_simplex(self.predict_raw(features), self.p_min)


def _objective(flat: np.ndarray, design: np.ndarray, onehot: np.ndarray, penalty: np.ndarray):
    theta = flat.reshape(onehot.shape[1], design.shape[1])
    logits = design @ theta.T
    log_probs = log_softmax(logits, axis=1)
    n = design.shape[0]
    loss = -np.sum(onehot * log_probs) / n + 0.5 * np.sum(penalty * theta**2)
    grad = (np.exp(log_probs) - onehot).T @ design / n + penalty * theta
    return loss, grad.ravel()


def fit_multinomial_logit(
    features: np.ndarray,
    actions: np.ndarray,
    num_actions: int,
    reg: float,
    p_min: float,
    max_iter: int = 500,
    gtol: float = 1e-6,
) -> MultinomialLogitModel:
    features = np.asarray(features, dtype=float)
    actions = np.asarray(actions, dtype=np.int64)
    if features.ndim != 2 or features.shape[0] != actions.shape[0]:
        raise InvalidInputException("logit features and actions must have matching rows")
    if reg <= 0:
        raise InvalidInputException(f"logit regularization must be positive, got {reg}")

    mean = features.mean(axis=0)
    scale = features.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    design = np.hstack([(features - mean) / scale, np.ones((features.shape[0], 1))])
    onehot = np.eye(num_actions)[actions]

    penalty = np.full((num_actions, design.shape[1]), reg)
    penalty[:, -1] = INTERCEPT_REG
    start = np.zeros(num_actions * design.shape[1])
    result = minimize(
        _objective,
        start,
        args=(design, onehot, penalty),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": gtol},
    )
    grad_norm = float(np.max(np.abs(result.jac)))
    if not result.success:
        if grad_norm > SOFT_GRAD_TOL or not np.all(np.isfinite(result.x)):
            raise ConvergenceException(f"multinomial logit stopped: {result.message}", grad_norm=grad_norm)
        logger.warning(f"Multinomial logit stopped early ({result.message}); gradient norm {grad_norm:.2e} accepted")
    logger.debug(f"Multinomial logit fitted in {result.nit} iterations, gradient norm {grad_norm:.2e}")

    return MultinomialLogitModel(
        theta=result.x.reshape(num_actions, design.shape[1]),
        feature_mean=mean,
        feature_scale=scale,
        reg=reg,
        p_min=p_min,
        grad_norm=grad_norm,
    )
