#estimators.py
import logging
from typing import Optional, Sequence, Union

import numpy as np
from pydantic import Field
from scipy.special import softmax
from scipy.stats import norm

from src.exceptions.custom_exceptions import (
    InvalidConfigException,
    InvalidInputException,
    InvalidPropensityException,
)
from src.models.policy import Policy
from src.models.reward import RewardModel
from src.schemas.base import ArraySchema
from src.schemas.dataset import FoldAssignment, LaggedDataset
from src.schemas.experiment import NuisanceConfig
from src.schemas.report import EstimateReport, EstimateResult, InfluenceVector
from src.services.nuisance import (
    NuisanceSet,
    fit_current_propensity,
    fit_nuisances,
    fit_reward_model_plain,
    nuisance_diagnostics,
    predict_reward,
)

logger = logging.getLogger(__name__)

RewardSource = Union[np.ndarray, RewardModel]


def normal_quantile(level: float) -> float:
    return float(norm.ppf(0.5 + level / 2.0))


def influence_ci(influence: Union[InfluenceVector, np.ndarray], estimate: float, level: float = 0.95) -> tuple[float, float, float]:
    """Wald interval from centered influence contributions."""
    values = influence.values if isinstance(influence, InfluenceVector) else np.asarray(influence, dtype=float)
    n = values.shape[0]
    if n < 2:
        raise InvalidInputException("an interval needs at least 2 influence contributions")
    se = float(np.sqrt(np.sum(values**2)) / n)
    half = normal_quantile(level) * se
    return se, estimate - half, estimate + half


def ess(weights: np.ndarray) -> float:
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise InvalidInputException("effective sample size needs finite nonnegative weights")
    total = float(np.sum(weights))
    if total == 0.0:
        raise InvalidInputException("effective sample size is undefined for all-zero weights")
    return total**2 / float(np.sum(weights**2))


def _summarize(
    name: str,
    contributions: np.ndarray,
    level: float,
    weights: Optional[np.ndarray] = None,
    per_lag_values: Sequence[float] = (),
    alpha: Sequence[float] = (),
) -> EstimateResult:
    n = contributions.shape[0]
    value = float(np.mean(contributions))
    influence = contributions - value
    se, ci_low, ci_high = influence_ci(influence, value, level)
    # model-only estimates carry no weights; every sample counts fully
    effective = ess(weights) if weights is not None and np.any(weights > 0) else float(n)
    report = EstimateReport(
        estimator_name=name,
        value=value,
        se=se,
        ci_low=ci_low,
        ci_high=ci_high,
        ess=min(effective, float(n)),
        per_lag_values=list(per_lag_values),
        lag_weights_alpha=list(alpha),
        n=n,
    )
    return EstimateResult(report=report, influence=InfluenceVector(values=influence), weights=weights)


def check_propensities(propensities: np.ndarray) -> np.ndarray:
    propensities = np.asarray(propensities, dtype=float)
    bad = np.flatnonzero(~np.isfinite(propensities) | (propensities <= 0.0))
    if bad.size:
        raise InvalidPropensityException(f"propensity {propensities[bad[0]]} is not positive", index=int(bad[0]))
    return propensities


def resolve_propensities(
    data: LaggedDataset,
    config: NuisanceConfig,
    folds: Optional[FoldAssignment] = None,
) -> np.ndarray:
    """Logged propensities when every sample has one, else a cross-fitted current-context logit."""
    if data.has_propensities:
        return check_propensities(data.propensities)
    if folds is None:
        raise InvalidInputException("fitting propensities needs a fold assignment")
    logger.info("Logged propensities unavailable; fitting a current-context multinomial logit")
    return check_propensities(fit_current_propensity(data, folds, config))


def _reward_table(data: LaggedDataset, q_hat: RewardSource) -> np.ndarray:
    if isinstance(q_hat, RewardModel):
        return q_hat.predict(data.x, data.lag(0) if q_hat.uses_lag else None)
    table = np.asarray(q_hat, dtype=float)
    if table.shape != (data.n, data.num_actions):
        raise InvalidInputException(f"reward table must have shape ({data.n}, {data.num_actions}), got {table.shape}")
    return table


def _taken(table: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return table[np.arange(actions.shape[0]), actions]


def dm_estimate(data: LaggedDataset, q_hat: RewardSource, policy: Policy, level: float = 0.95) -> EstimateResult:
    table = _reward_table(data, q_hat)
    contributions = np.sum(policy.probs(data.x) * table, axis=1)
    return _summarize("dm", contributions, level)


def ips_estimate(data: LaggedDataset, policy: Policy, propensities: np.ndarray, level: float = 0.95) -> EstimateResult:
    propensities = check_propensities(propensities)
    weights = _taken(policy.probs(data.x), data.actions) / propensities
    return _summarize("ips", weights * data.rewards, level, weights)


def dr_estimate(
    data: LaggedDataset,
    policy: Policy,
    q_hat: RewardSource,
    propensities: np.ndarray,
    level: float = 0.95,
) -> EstimateResult:
    propensities = check_propensities(propensities)
    table = _reward_table(data, q_hat)
    probs = policy.probs(data.x)
    weights = _taken(probs, data.actions) / propensities
    contributions = weights * (data.rewards - _taken(table, data.actions)) + np.sum(probs * table, axis=1)
    return _summarize("dr", contributions, level, weights)


def dolce_contributions(
    rewards: np.ndarray,
    actions: np.ndarray,
    target_probs: np.ndarray,
    q_hat: np.ndarray,
    weights: np.ndarray,
) -> np.ndarray:
    """w(X^(k), A)(R - q_hat(A)) + sum_a pi(a|X) q_hat(a), per sample."""
    return weights * (rewards - _taken(q_hat, actions)) + np.sum(target_probs * q_hat, axis=1)


def dolce_lag_estimate(
    data: LaggedDataset,
    policy: Policy,
    nuisances: NuisanceSet,
    lag: int,
    level: float = 0.95,
) -> EstimateResult:
    if not 0 <= lag < data.num_lags:
        raise InvalidInputException(f"lag index {lag} not present; dataset has {data.num_lags} lag(s)")
    nuisance = nuisances.for_lag(lag)
    contributions = dolce_contributions(data.rewards, data.actions, policy.probs(data.x), nuisance.q_hat, nuisance.weights)
    return _summarize(f"dolce_lag_{nuisance.label}", contributions, level, nuisance.weights)


def softmin_weights(alc: Sequence[float], tau: float) -> np.ndarray:
    if tau <= 0:
        raise InvalidConfigException(f"softmin temperature must be positive, got {tau}", keys=["nuisance.tau"])
    scores = np.asarray(alc, dtype=float)
    if scores.ndim != 1 or scores.shape[0] == 0:
        raise InvalidInputException("softmin needs at least one ALC score")
    return softmax(-scores / tau)


def dolce_estimate(
    data: LaggedDataset,
    policy: Policy,
    nuisances: NuisanceSet,
    tau: float,
    level: float = 0.95,
    name: str = "dolce",
) -> EstimateResult:
    """Softmin aggregate of the per-lag estimates; alpha is held fixed for the interval."""
    per_lag = [dolce_lag_estimate(data, policy, nuisances, nuisance.lag, level) for nuisance in nuisances.lags]
    alpha = softmin_weights(nuisances.alc, tau)
    value = float(sum(a * result.report.value for a, result in zip(alpha, per_lag)))
    influence = sum(a * result.influence.values for a, result in zip(alpha, per_lag))
    weights = sum(a * nuisance.weights for a, nuisance in zip(alpha, nuisances.lags))
    se, ci_low, ci_high = influence_ci(influence, value, level)
    effective = ess(weights) if np.any(weights > 0) else float(data.n)
    report = EstimateReport(
        estimator_name=name,
        value=value,
        se=se,
        ci_low=ci_low,
        ci_high=ci_high,
        ess=min(effective, float(data.n)),
        per_lag_values=[result.report.value for result in per_lag],
        lag_weights_alpha=alpha.tolist(),
        n=data.n,
    )
    return EstimateResult(report=report, influence=InfluenceVector(values=influence), weights=weights)


class EstimationRun(ArraySchema):
    results: dict[str, EstimateResult]
    diagnostics: dict = Field(default_factory=dict)
    refused: dict[str, str] = Field(default_factory=dict)

    @property
    def reports(self) -> list[EstimateReport]:
        return [result.report for result in self.results.values()]


def run_estimators(
    data: LaggedDataset,
    policy: Policy,
    estimators: Sequence[str],
    config: NuisanceConfig,
    folds: FoldAssignment,
    propensities: Optional[np.ndarray] = None,
) -> EstimationRun:
    """Fit what the requested estimators need once and evaluate each of them."""
    results: dict[str, EstimateResult] = {}
    refused: dict[str, str] = {}
    diagnostics: dict = {}
    needs_baseline_model = {"dm", "dr"} & set(estimators)
    needs_propensity = {"ips", "dr"} & set(estimators)

    q_current = None
    if needs_baseline_model:
        q_current = predict_reward(fit_reward_model_plain(data, None, folds, config.reg), data, None, folds)
    if needs_propensity and propensities is None:
        propensities = resolve_propensities(data, config, folds)

    for name in estimators:
        if name == "dm":
            results[name] = dm_estimate(data, q_current, policy, config.level)
        elif name == "ips":
            results[name] = ips_estimate(data, policy, propensities, config.level)
        elif name == "dr":
            results[name] = dr_estimate(data, policy, q_current, propensities, config.level)
        elif name in ("dolce", "dolce_mtri"):
            try:
                nuisances = fit_nuisances(data, policy, folds, config, use_mtri=True if name == "dolce_mtri" else None)
            except InvalidInputException as e:
                if data.num_lags > 0:
                    raise
                logger.warning(f"Estimator '{name}' refused: {e.detail}")
                refused[name] = e.detail
                continue
            result = dolce_estimate(data, policy, nuisances, config.tau, config.level, name=name)
            results[name] = result
            per_lag_ess = [
                ess(nuisance.weights) if np.any(nuisance.weights > 0) else float(data.n) for nuisance in nuisances.lags
            ]
            diagnostics[name] = nuisance_diagnostics(nuisances, per_lag_ess)
            diagnostics[name]["ess"] = result.report.ess
        else:
            raise InvalidConfigException(f"unknown estimator '{name}'", keys=["sweep.estimators"])
    for name in ("ips", "dr"):
        if name in results:
            diagnostics[name] = {"ess": results[name].report.ess}
    return EstimationRun(results=results, diagnostics=diagnostics, refused=refused)
