#nuisance.py
"""Cross-fitted nuisance models for lag-aware estimation.

Each ``fit_*`` function returns a ``FoldModels`` whose j-th model was trained on
every fold except j; out-of-fold predictions are assembled with
``FoldModels.predict_out_of_fold``.
"""
import logging
import math
from typing import Optional

import numpy as np
from pydantic import Field

from shared.seeding import FOLD_STREAM, make_rng
from src.exceptions.custom_exceptions import InvalidConfigException, InvalidInputException
from src.models.base import FoldModels
from src.models.logit import MultinomialLogitModel, fit_multinomial_logit, floor_simplex
from src.models.policy import Policy
from src.models.reward import (
    CriticDictionary,
    RewardModel,
    critic_features,
    fit_mtri_reward,
    fit_plain_reward,
    lag_features,
)
from src.models.ridge import RidgeModel, fit_ridge
from src.schemas.base import ArraySchema
from src.schemas.dataset import FoldAssignment, LaggedDataset
from src.schemas.experiment import NuisanceConfig

logger = logging.getLogger(__name__)

WEIGHT_QUANTILES = (0.5, 0.9, 0.99)


def kfold_split(n: int, k_folds: int, seed: int, *keys: int) -> FoldAssignment:
    if k_folds < 2:
        raise InvalidConfigException(f"cross-fitting needs at least 2 folds, got {k_folds}", keys=["nuisance.k_folds"])
    if n < 2 * k_folds:
        raise InvalidInputException(f"{n} samples cannot be split into {k_folds} folds of at least 2")
    order = make_rng(seed, FOLD_STREAM, *keys).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[order] = np.arange(n) % k_folds
    return FoldAssignment(fold_of=fold_of, num_folds=k_folds)


def _require_lag(data: LaggedDataset, lag: int):
    if not 0 <= lag < data.num_lags:
        raise InvalidInputException(f"lag index {lag} not present; dataset has {data.num_lags} lag(s)")


def action_means(data: LaggedDataset) -> np.ndarray:
    """Global mean reward per action, the overall mean for actions never logged."""
    overall = float(np.mean(data.rewards))
    counts = np.bincount(data.actions, minlength=data.num_actions)
    sums = np.bincount(data.actions, weights=data.rewards, minlength=data.num_actions)
    return np.divide(sums, counts, out=np.full(data.num_actions, overall), where=counts > 0)


def fit_lag_propensity(
    data: LaggedDataset,
    lag: int,
    folds: FoldAssignment,
    reg: float,
    p_min: float,
    max_iter: int = 500,
) -> FoldModels:
    """Per-fold multinomial logit of A on X^(k)."""
    _require_lag(data, lag)
    x_lag = data.lag(lag)
    models = []
    for j in range(folds.num_folds):
        rows = folds.train_indices(j)
        models.append(fit_multinomial_logit(x_lag[rows], data.actions[rows], data.num_actions, reg, p_min, max_iter))
        logger.debug(f"Lag {lag} propensity fitted for fold {j} on {rows.shape[0]} rows")
    return FoldModels(models=models)


def predict_lag_propensity(models: FoldModels, data: LaggedDataset, lag: int, folds: FoldAssignment) -> np.ndarray:
    x_lag = data.lag(lag)
    return models.predict_out_of_fold(folds, lambda model, rows: model.predict_proba(x_lag[rows]))


def fit_lag_target_marginal(
    data: LaggedDataset,
    policy: Policy,
    lag: int,
    folds: FoldAssignment,
    reg: float,
) -> FoldModels:
    """Per-fold ridge of the pseudo-outcomes pi(a | X_i) on lag features, one target per action."""
    _require_lag(data, lag)
    pseudo = policy.probs(data.x)
    features = lag_features(data.lag(lag))
    models = []
    for j in range(folds.num_folds):
        rows = folds.train_indices(j)
        models.append(fit_ridge(features[rows], pseudo[rows], reg))
    return FoldModels(models=models)


def predict_lag_target_marginal(
    models: FoldModels,
    data: LaggedDataset,
    lag: int,
    folds: FoldAssignment,
    p_min: float,
) -> np.ndarray:
    features = lag_features(data.lag(lag))
    raw = models.predict_out_of_fold(folds, lambda model, rows: model.predict(features[rows]))
    return floor_simplex(raw, p_min)


def lag_weights(bar_theta: np.ndarray, bar_0: np.ndarray, actions: np.ndarray, clip: float = math.inf) -> np.ndarray:
    """Clipped lag weights of the taken actions; bar_0 is already floored at p_min."""
    rows = np.arange(actions.shape[0])
    return np.minimum(bar_theta[rows, actions] / bar_0[rows, actions], clip)


def fit_reward_model_plain(
    data: LaggedDataset,
    lag: Optional[int],
    folds: FoldAssignment,
    reg: float,
) -> FoldModels:
    """Per-fold per-action ridge of R on [x, x^(k)]; lag=None fits on the current context only."""
    if lag is not None:
        _require_lag(data, lag)
    x_lag = None if lag is None else data.lag(lag)
    fallback = action_means(data)
    models = []
    for j in range(folds.num_folds):
        rows = folds.train_indices(j)
        model = fit_plain_reward(
            data.x[rows],
            None if x_lag is None else x_lag[rows],
            data.actions[rows],
            data.rewards[rows],
            data.num_actions,
            reg,
            fallback,
        )
        if model.fallback_actions:
            logger.warning(f"Fold {j}: actions {model.fallback_actions} absent from training rows, using global means")
        models.append(model)
    return FoldModels(models=models)


def fit_critics(data: LaggedDataset, lag: int, folds: FoldAssignment, reg: float) -> FoldModels:
    """Critic centering per fold; model j is only applied to the rows of fold j."""
    _require_lag(data, lag)
    x_lag = data.lag(lag)
    models = []
    for j in range(folds.num_folds):
        rows = folds.train_indices(j)
        models.append(CriticDictionary.fit(data.x[rows], x_lag[rows], data.actions[rows], data.num_actions, reg))
    return FoldModels(models=models)


def fit_reward_model_mtri(
    data: LaggedDataset,
    lag: int,
    folds: FoldAssignment,
    critics: FoldModels,
    mtri_penalty: float,
    reg: float,
    gram_ridge: float = 1e-6,
) -> FoldModels:
    _require_lag(data, lag)
    if critics.num_folds != folds.num_folds:
        raise InvalidInputException("critic dictionary was fitted for a different fold assignment")
    x_lag = data.lag(lag)
    centered = critics.predict_out_of_fold(
        folds, lambda model, rows: model.centered_taken(data.x[rows], x_lag[rows], data.actions[rows])
    )
    fallback = action_means(data)
    models = []
    for j in range(folds.num_folds):
        rows = folds.train_indices(j)
        model = fit_mtri_reward(
            data.x[rows],
            x_lag[rows],
            data.actions[rows],
            data.rewards[rows],
            data.num_actions,
            reg,
            mtri_penalty,
            gram_ridge,
            centered[rows],
            fallback,
        )
        if model.fallback_actions:
            logger.warning(f"Fold {j}: actions {model.fallback_actions} absent from training rows, using global means")
        models.append(model)
    return FoldModels(models=models)


def predict_reward(models: FoldModels, data: LaggedDataset, lag: Optional[int], folds: FoldAssignment) -> np.ndarray:
    """Out-of-fold q_hat table (n, |A|)."""
    x_lag = None if lag is None else data.lag(lag)

    def predict(model: RewardModel, rows: np.ndarray) -> np.ndarray:
        return model.predict(data.x[rows], None if x_lag is None else x_lag[rows])

    return models.predict_out_of_fold(folds, predict)


def alc_features(x: np.ndarray, x_lag: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(full, lag-only) regressors of the ALC projection."""
    lag_only = lag_features(x_lag)
    return np.hstack([critic_features(x, x_lag), lag_only]), lag_only


def estimate_alc(
    data: LaggedDataset,
    lag: int,
    folds: FoldAssignment,
    reward: FoldModels,
    reg: float,
) -> float:
    """mean((m1 - m0)^2) where m1, m0 project the out-of-fold residual on full and lag-only features."""
    _require_lag(data, lag)
    x_lag = data.lag(lag)
    q_hat = predict_reward(reward, data, lag, folds)
    residual = data.rewards - q_hat[np.arange(data.n), data.actions]
    full, lag_only = alc_features(data.x, x_lag)
    gap = np.zeros(data.n)
    for j in range(folds.num_folds):
        train, test = folds.train_indices(j), folds.test_indices(j)
        for a in range(data.num_actions):
            fit_rows = train[data.actions[train] == a]
            eval_rows = test[data.actions[test] == a]
            if fit_rows.shape[0] == 0 or eval_rows.shape[0] == 0:
                continue
            m1 = fit_ridge(full[fit_rows], residual[fit_rows], reg)
            m0 = fit_ridge(lag_only[fit_rows], residual[fit_rows], reg)
            gap[eval_rows] = m1.predict(full[eval_rows]) - m0.predict(lag_only[eval_rows])
    return max(float(np.mean(gap**2)), 0.0)


class LagNuisance(ArraySchema):
    """Fitted nuisances and their out-of-fold predictions for one lag."""

    lag: int = Field(ge=0)
    label: str
    propensity: FoldModels
    target_marginal: FoldModels
    reward: FoldModels
    critics: Optional[FoldModels] = None
    alc: float = Field(ge=0.0)
    bar_pi_0: np.ndarray
    bar_pi_theta: np.ndarray
    q_hat: np.ndarray
    weights: np.ndarray
    raw_ratio: np.ndarray
    clip: float

    @property
    def fallback_actions(self) -> list[int]:
        return sorted({a for model in self.reward.models for a in model.fallback_actions})


class NuisanceSet(ArraySchema):
    folds: FoldAssignment
    lags: list[LagNuisance]
    p_min: float
    clip: float

    @property
    def alc(self) -> list[float]:
        return [nuisance.alc for nuisance in self.lags]

    def for_lag(self, lag: int) -> LagNuisance:
        for nuisance in self.lags:
            if nuisance.lag == lag:
                return nuisance
        raise InvalidInputException(f"no nuisances fitted for lag index {lag}")


def lag_weight(nuisances: NuisanceSet, lag: int, fold: int, x_lag: np.ndarray, a: int, clip: Optional[float] = None) -> float:
    """Weight of one (x^(k), a) pair under the models held out for ``fold``."""
    nuisance = nuisances.for_lag(lag)
    features = np.atleast_2d(np.asarray(x_lag, dtype=float))
    bar_0 = nuisance.propensity.models[fold].predict_proba(features)
    bar_theta = floor_simplex(nuisance.target_marginal.models[fold].predict(lag_features(features)), nuisances.p_min)
    bound = nuisances.clip if clip is None else clip
    return float(lag_weights(bar_theta, bar_0, np.array([a]), bound)[0])


def refresh_target_marginal(
    nuisance: LagNuisance,
    data: LaggedDataset,
    policy: Policy,
    folds: FoldAssignment,
    config: NuisanceConfig,
) -> LagNuisance:
    """Refit the policy-dependent pieces of a lag nuisance for a new target policy."""
    target = fit_lag_target_marginal(data, policy, nuisance.lag, folds, config.reg)
    bar_theta = predict_lag_target_marginal(target, data, nuisance.lag, folds, config.p_min)
    return nuisance.model_copy(
        update={
            "target_marginal": target,
            "bar_pi_theta": bar_theta,
            "weights": lag_weights(bar_theta, nuisance.bar_pi_0, data.actions, config.clip),
            "raw_ratio": lag_weights(bar_theta, nuisance.bar_pi_0, data.actions),
        }
    )


def fit_lag_nuisance(
    data: LaggedDataset,
    policy: Policy,
    lag: int,
    folds: FoldAssignment,
    config: NuisanceConfig,
    use_mtri: Optional[bool] = None,
) -> LagNuisance:
    _require_lag(data, lag)
    mtri = config.use_mtri if use_mtri is None else use_mtri
    propensity = fit_lag_propensity(data, lag, folds, config.logit_reg, config.p_min, config.max_iter)
    bar_0 = predict_lag_propensity(propensity, data, lag, folds)
    critics = None
    if mtri:
        critics = fit_critics(data, lag, folds, config.reg)
        reward = fit_reward_model_mtri(data, lag, folds, critics, config.mtri_penalty, config.reg, config.gram_ridge)
    else:
        reward = fit_reward_model_plain(data, lag, folds, config.reg)
    alc = estimate_alc(data, lag, folds, reward, config.reg)
    logger.debug(f"Lag {data.lag_labels[lag]}: ALC {alc:.4e} ({'mtri' if mtri else 'plain'} reward model)")
    placeholder = np.zeros((data.n, data.num_actions))
    nuisance = LagNuisance(
        lag=lag,
        label=data.lag_labels[lag],
        propensity=propensity,
        target_marginal=FoldModels(models=[]),
        reward=reward,
        critics=critics,
        alc=alc,
        bar_pi_0=bar_0,
        bar_pi_theta=placeholder,
        q_hat=predict_reward(reward, data, lag, folds),
        weights=np.zeros(data.n),
        raw_ratio=np.zeros(data.n),
        clip=config.clip,
    )
    return refresh_target_marginal(nuisance, data, policy, folds, config)


def fit_nuisances(
    data: LaggedDataset,
    policy: Policy,
    folds: FoldAssignment,
    config: NuisanceConfig,
    use_mtri: Optional[bool] = None,
) -> NuisanceSet:
    if data.num_lags == 0:
        raise InvalidInputException("dataset has no lag columns; lag-aware estimation needs at least one lag")
    lags = [fit_lag_nuisance(data, policy, k, folds, config, use_mtri) for k in range(data.num_lags)]
    return NuisanceSet(folds=folds, lags=lags, p_min=config.p_min, clip=config.clip)


def fit_current_propensity(data: LaggedDataset, folds: FoldAssignment, config: NuisanceConfig) -> np.ndarray:
    """Out-of-fold pi_0_hat(A_i | X_i) from a current-context multinomial logit."""
    models = []
    for j in range(folds.num_folds):
        rows = folds.train_indices(j)
        models.append(
            fit_multinomial_logit(
                data.x[rows], data.actions[rows], data.num_actions, config.logit_reg, config.p_min, config.max_iter
            )
        )
    fitted = FoldModels(models=models)
    probs = fitted.predict_out_of_fold(folds, lambda model, rows: model.predict_proba(data.x[rows]))
    return probs[np.arange(data.n), data.actions]


def nuisance_diagnostics(nuisances: NuisanceSet, ess_by_lag: Optional[list[float]] = None) -> dict:
    """Per-lag ALC, weight quantiles, clip rate and reward-model fallbacks."""
    out = []
    for index, nuisance in enumerate(nuisances.lags):
        quantiles = np.quantile(nuisance.weights, WEIGHT_QUANTILES)
        entry = {
            "lag": nuisance.label,
            "alc": nuisance.alc,
            "weight_quantiles": {str(q): float(v) for q, v in zip(WEIGHT_QUANTILES, quantiles)},
            "weight_max": float(np.max(nuisance.weights)),
            "clip_rate": float(np.mean(nuisance.raw_ratio > nuisance.clip)),
            "fallback_actions": nuisance.fallback_actions,
        }
        if ess_by_lag is not None:
            entry["ess"] = ess_by_lag[index]
        out.append(entry)
    return {"p_min": nuisances.p_min, "clip": nuisances.clip, "lags": out}
