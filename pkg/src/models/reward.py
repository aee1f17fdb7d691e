#reward.py
import logging
from typing import Literal, Optional

import numpy as np
from pydantic import Field, field_validator
from scipy import linalg

from src.exceptions.custom_exceptions import InvalidInputException
from src.models.ridge import RidgeModel, fit_ridge, solve_penalized_normal_equations
from src.schemas.base import ArraySchema

logger = logging.getLogger(__name__)

MAX_GRAM_ESCALATIONS = 6
GRAM_CONDITION_LIMIT = 1e10
STEP_KNOT = 0.5
COUNT_START = 2
COUNT_LEVEL = 2


def step_basis(z: np.ndarray) -> np.ndarray:
    """1{z_j > knot} for every coordinate, then 1{#(z_j > knot, j >= 2) >= 2}."""
    above = z > STEP_KNOT
    count = np.sum(above[:, COUNT_START:], axis=1)
    return np.hstack([above.astype(float), (count >= COUNT_LEVEL).astype(float)[:, None]])


def reward_features(x: np.ndarray, x_lag: Optional[np.ndarray]) -> np.ndarray:
    """psi(x, x^(k)) = [step(x), step(x^(k))], additive in the two blocks; the intercept is added by the ridge solver."""
    current = step_basis(x)
    return current if x_lag is None else np.hstack([current, step_basis(x_lag)])


def lag_features(x_lag: np.ndarray) -> np.ndarray:
    return np.hstack([x_lag, x_lag**2])


def critic_features(x: np.ndarray, x_lag: np.ndarray) -> np.ndarray:
    """Base critics x_j, x_j^2, x_j * x^(k)_j for every coordinate j."""
    return np.hstack([x, x**2, x * x_lag])


def full_features(x: np.ndarray, x_lag: np.ndarray) -> np.ndarray:
    return np.hstack([critic_features(x, x_lag), lag_features(x_lag)])


class RewardModel(ArraySchema):
    """Per-action linear reward model q(x, x^(k), a) = psi(x, x^(k)) . coef_a + intercept_a.

    Actions listed in ``fallback_actions`` had no training rows; their row of
    ``coef`` is zero and their intercept is the global mean reward of that action.
    """

    coef: np.ndarray
    intercept: np.ndarray
    variant: Literal["plain", "mtri"] = "plain"
    uses_lag: bool = True
    fallback_actions: list[int] = Field(default_factory=list)

    @field_validator("coef", "intercept", mode="before")
    @classmethod
    def as_float_array(cls, value):
        array = np.array(value, dtype=float)
        array.setflags(write=False)
        return array

    @property
    def num_actions(self) -> int:
        return self.coef.shape[0]

    def predict(self, x: np.ndarray, x_lag: Optional[np.ndarray] = None) -> np.ndarray:
        if self.uses_lag and x_lag is None:
            raise InvalidInputException("this reward model needs lag contexts")
        features = reward_features(x, x_lag if self.uses_lag else None)
        return features @ self.coef.T + self.intercept

    def predict_taken(self, x: np.ndarray, x_lag: Optional[np.ndarray], actions: np.ndarray) -> np.ndarray:
        table = self.predict(x, x_lag)
        return table[np.arange(table.shape[0]), actions]


class CriticDictionary(ArraySchema):
    """Critics phi_j(x, x^(k)) * 1{A = a}, centered by per-action ridge fits on lag features."""

    num_actions: int = Field(ge=1)
    centering: list[Optional[RidgeModel]]

    @property
    def critics_per_action(self) -> int:
        for model in self.centering:
            if model is not None:
                return model.weights.shape[1]
        return 0

    @classmethod
    def fit(
        cls,
        x: np.ndarray,
        x_lag: np.ndarray,
        actions: np.ndarray,
        num_actions: int,
        reg: float,
    ) -> "CriticDictionary":
        base = critic_features(x, x_lag)
        conditioning = lag_features(x_lag)
        centering: list[Optional[RidgeModel]] = []
        for a in range(num_actions):
            rows = actions == a
            centering.append(fit_ridge(conditioning[rows], base[rows], reg) if rows.any() else None)
        return cls(num_actions=num_actions, centering=centering)

    def centered_for_action(self, x: np.ndarray, x_lag: np.ndarray, a: int) -> np.ndarray:
        base = critic_features(x, x_lag)
        model = self.centering[a]
        if model is None:
            return np.zeros_like(base)
        return base - model.predict(lag_features(x_lag))

    def centered_taken(self, x: np.ndarray, x_lag: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Centered critics (n, J) of each row's own action."""
        out = np.zeros((x.shape[0], critic_features(x[:1], x_lag[:1]).shape[1]))
        for a in range(self.num_actions):
            rows = actions == a
            if rows.any():
                out[rows] = self.centered_for_action(x[rows], x_lag[rows], a)
        return out

    def centered(self, x: np.ndarray, x_lag: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Full centered critic matrix (n, |A| * J) with one block per action."""
        per_action = critic_features(x, x_lag).shape[1]
        out = np.zeros((x.shape[0], self.num_actions * per_action))
        for a in range(self.num_actions):
            rows = actions == a
            if rows.any():
                out[rows, a * per_action:(a + 1) * per_action] = self.centered_for_action(x[rows], x_lag[rows], a)
        return out


def _stack_action_fits(
    betas: list[np.ndarray],
    fallback: dict[int, float],
    variant: str,
    uses_lag: bool,
) -> RewardModel:
    width = next(beta.shape[0] for beta in betas if beta is not None) - 1
    coef = np.zeros((len(betas), width))
    intercept = np.zeros(len(betas))
    for a, beta in enumerate(betas):
        if beta is None:
            intercept[a] = fallback[a]
        else:
            intercept[a] = beta[0]
            coef[a] = beta[1:]
    return RewardModel(
        coef=coef,
        intercept=intercept,
        variant=variant,
        uses_lag=uses_lag,
        fallback_actions=sorted(fallback),
    )


def fit_plain_reward(
    x: np.ndarray,
    x_lag: Optional[np.ndarray],
    actions: np.ndarray,
    rewards: np.ndarray,
    num_actions: int,
    reg: float,
    fallback_means: np.ndarray,
) -> RewardModel:
    features = reward_features(x, x_lag)
    betas: list[Optional[np.ndarray]] = []
    fallback: dict[int, float] = {}
    for a in range(num_actions):
        rows = actions == a
        if not rows.any():
            fallback[a] = float(fallback_means[a])
            betas.append(None)
            continue
        betas.append(solve_penalized_normal_equations(features[rows], rewards[rows], reg))
    if len(fallback) == num_actions:
        raise InvalidInputException("reward model has no training rows")
    return _stack_action_fits(betas, fallback, "plain", x_lag is not None)


def _moment_terms(
    augmented: np.ndarray,
    targets: np.ndarray,
    critics: np.ndarray,
    gram_ridge: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Return (B' C^-1 B, B' C^-1 c) with B = critics' Z, c = critics' y, C = critics' critics + n eps I."""
    n = critics.shape[0]
    cross = critics.T @ augmented
    target_moment = critics.T @ targets
    ridge = gram_ridge
    for attempt in range(MAX_GRAM_ESCALATIONS + 1):
        gram = critics.T @ critics + n * ridge * np.eye(critics.shape[1])
        if np.linalg.cond(gram) < GRAM_CONDITION_LIMIT or attempt == MAX_GRAM_ESCALATIONS:
            break
        logger.warning(f"Critic Gram matrix ill-conditioned at ridge {ridge:.1e}; increasing ridge")
        ridge *= 10.0
    factor = linalg.cho_factor(gram)
    solved_cross = linalg.cho_solve(factor, cross)
    solved_target = linalg.cho_solve(factor, target_moment)
    return cross.T @ solved_cross, cross.T @ solved_target


def fit_mtri_reward(
    x: np.ndarray,
    x_lag: np.ndarray,
    actions: np.ndarray,
    rewards: np.ndarray,
    num_actions: int,
    reg: float,
    penalty: float,
    gram_ridge: float,
    centered_critics: np.ndarray,
    fallback_means: np.ndarray,
) -> RewardModel:
    """Minimize ||y - Z beta||^2 + reg ||w||^2 + penalty * n_a * m' (G + eps I)^-1 m per action.

    ``centered_critics`` holds the centered critics of each row's own action,
    computed out of fold by the caller.

    m = critics' r / n_a and G = critics' critics / n_a, so the penalty equals
    r' F (F'F + n_a eps I)^-1 F' r and the objective stays quadratic in beta.
    """
    if centered_critics.shape[0] != x.shape[0]:
        raise InvalidInputException(
            f"centered critics have {centered_critics.shape[0]} rows, contexts have {x.shape[0]}"
        )
    if penalty == 0.0:
        model = fit_plain_reward(x, x_lag, actions, rewards, num_actions, reg, fallback_means)
        return model.model_copy(update={"variant": "mtri"})

    features = reward_features(x, x_lag)
    betas: list[Optional[np.ndarray]] = []
    fallback: dict[int, float] = {}
    for a in range(num_actions):
        rows = actions == a
        if not rows.any():
            fallback[a] = float(fallback_means[a])
            betas.append(None)
            continue
        design = features[rows]
        augmented = np.hstack([np.ones((design.shape[0], 1)), design])
        centered = centered_critics[rows]
        extra_gram, extra_rhs = _moment_terms(augmented, rewards[rows], centered, gram_ridge)
        betas.append(
            solve_penalized_normal_equations(
                design,
                rewards[rows],
                reg,
                extra_gram=penalty * extra_gram,
                extra_rhs=penalty * extra_rhs,
            )
        )
    if len(fallback) == num_actions:
        raise InvalidInputException("reward model has no training rows")
    return _stack_action_fits(betas, fallback, "mtri", True)


def moment_vector(
    model: RewardModel,
    x: np.ndarray,
    x_lag: np.ndarray,
    actions: np.ndarray,
    rewards: np.ndarray,
    critics: CriticDictionary,
) -> np.ndarray:
    """Empirical moments mean((R - q) * centered critic) stacked over actions."""
    residual = rewards - model.predict_taken(x, x_lag, actions)
    centered = critics.centered(x, x_lag, actions)
    return centered.T @ residual / x.shape[0]
