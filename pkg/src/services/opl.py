#opl.py
"""Policy-gradient estimators and gradient-ascent training for linear-softmax policies."""
import logging
from typing import Optional

import numpy as np
from pydantic import Field

from shared.seeding import INIT_STREAM, make_rng
from src.exceptions.custom_exceptions import InvalidInputException, NumericException, UnsupportedPolicyException
from src.models.base import FoldModels
from src.models.logit import floor_simplex
from src.models.policy import LinearSoftmaxPolicy, Policy
from src.models.reward import lag_features
from src.models.ridge import fit_ridge
from src.schemas.base import ArraySchema, BaseSchema
from src.schemas.dataset import FoldAssignment, LaggedDataset
from src.schemas.experiment import NuisanceConfig, TrainConfig
from src.services.estimators import check_propensities, resolve_propensities, softmin_weights
from src.services.nuisance import (
    NuisanceSet,
    fit_lag_target_marginal,
    fit_nuisances,
    fit_reward_model_plain,
    predict_lag_target_marginal,
    predict_reward,
    refresh_target_marginal,
)
from src.services.synthgen import policy_value

logger = logging.getLogger(__name__)


def _require_softmax(policy: Policy) -> LinearSoftmaxPolicy:
    if not isinstance(policy, LinearSoftmaxPolicy):
        raise UnsupportedPolicyException(f"policy '{policy.kind}' has no parameter score")
    return policy


def _taken_scores(scores: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return scores[np.arange(actions.shape[0]), actions]


def grad_ips(data: LaggedDataset, policy: LinearSoftmaxPolicy, propensities: np.ndarray) -> np.ndarray:
    policy = _require_softmax(policy)
    propensities = check_propensities(propensities)
    probs = policy.probs(data.x)
    weights = probs[np.arange(data.n), data.actions] / propensities
    scores = _taken_scores(policy.scores(data.x), data.actions)
    return np.mean((weights * data.rewards)[:, None] * scores, axis=0)


def grad_dr(
    data: LaggedDataset,
    policy: LinearSoftmaxPolicy,
    q_hat: np.ndarray,
    propensities: np.ndarray,
) -> np.ndarray:
    policy = _require_softmax(policy)
    propensities = check_propensities(propensities)
    rows = np.arange(data.n)
    probs = policy.probs(data.x)
    weights = probs[rows, data.actions] / propensities
    all_scores = policy.scores(data.x)
    residual = data.rewards - q_hat[rows, data.actions]
    correction = np.mean((weights * residual)[:, None] * _taken_scores(all_scores, data.actions), axis=0)
    model_term = np.mean(np.einsum("ia,ia,iam->im", probs, q_hat, all_scores), axis=0)
    return correction + model_term


class LagScoreModels(ArraySchema):
    """Ridge fits of pi(a|X) s(a|X) and pi(a|X) on lag features, with out-of-fold bar s."""

    lag: int = Field(ge=0)
    score: FoldModels
    marginal: FoldModels
    bar_s: np.ndarray


def fit_lag_score_marginal(
    data: LaggedDataset,
    policy: LinearSoftmaxPolicy,
    lag: int,
    folds: FoldAssignment,
    reg: float,
    p_min: float = 1e-3,
    marginal: Optional[FoldModels] = None,
) -> LagScoreModels:
    """bar s = m_hat / bar_pi_theta_hat, the denominator floored at p_min.

    ``marginal`` reuses target-marginal fits already made for this policy and lag.
    """
    policy = _require_softmax(policy)
    if not 0 <= lag < data.num_lags:
        raise InvalidInputException(f"lag index {lag} not present; dataset has {data.num_lags} lag(s)")
    features = lag_features(data.lag(lag))
    weighted = policy.probs(data.x)[:, :, None] * policy.scores(data.x)
    n, num_actions, num_params = weighted.shape
    targets = weighted.reshape(n, num_actions * num_params)
    models = [fit_ridge(features[folds.train_indices(j)], targets[folds.train_indices(j)], reg) for j in range(folds.num_folds)]
    score = FoldModels(models=models)
    numerator = score.predict_out_of_fold(folds, lambda model, rows: model.predict(features[rows]))
    if marginal is None:
        marginal = fit_lag_target_marginal(data, policy, lag, folds, reg)
    bar_theta = predict_lag_target_marginal(marginal, data, lag, folds, p_min)
    bar_s = numerator.reshape(n, num_actions, num_params) / bar_theta[:, :, None]
    return LagScoreModels(lag=lag, score=score, marginal=marginal, bar_s=bar_s)


def grad_dolce(
    data: LaggedDataset,
    policy: LinearSoftmaxPolicy,
    nuisances: NuisanceSet,
    lag_scores: LagScoreModels,
    lag: int,
) -> np.ndarray:
    """(1/n) sum of w(X^(k), A)(R - q_hat) bar s(A | X^(k)) + sum_a pi(a|X) q_hat s(a|X)."""
    policy = _require_softmax(policy)
    nuisance = nuisances.for_lag(lag)
    rows = np.arange(data.n)
    residual = data.rewards - nuisance.q_hat[rows, data.actions]
    lag_term = (nuisance.weights * residual)[:, None] * lag_scores.bar_s[rows, data.actions]
    model_term = np.einsum("ia,ia,iam->im", policy.probs(data.x), nuisance.q_hat, policy.scores(data.x))
    return np.mean(lag_term, axis=0) + np.mean(model_term, axis=0)


def grad_dolce_softmin(
    data: LaggedDataset,
    policy: LinearSoftmaxPolicy,
    nuisances: NuisanceSet,
    lag_scores: list[LagScoreModels],
    tau: float,
) -> np.ndarray:
    alpha = softmin_weights(nuisances.alc, tau)
    return sum(a * grad_dolce(data, policy, nuisances, models, models.lag) for a, models in zip(alpha, lag_scores))


def initial_policy(num_actions: int, d: int, config: TrainConfig, replication: int = 0) -> LinearSoftmaxPolicy:
    """theta_0 shared by every estimator of one replication."""
    rng = make_rng(config.init_seed, INIT_STREAM, replication)
    return LinearSoftmaxPolicy(theta=config.init_scale * rng.standard_normal((num_actions, d + 1)))


class GradientOracle:
    """Evaluates one gradient estimator at any theta, refitting theta-dependent nuisances on schedule."""

    def __init__(
        self,
        data: LaggedDataset,
        estimator: str,
        nuisance_config: NuisanceConfig,
        folds: FoldAssignment,
        policy: LinearSoftmaxPolicy,
        use_mtri: bool = False,
        propensities: Optional[np.ndarray] = None,
    ):
        self.data = data
        self.estimator = estimator
        self.config = nuisance_config
        self.folds = folds
        self.propensities = None
        self.q_current = None
        self.nuisances = None
        if estimator in ("ips", "dr"):
            self.propensities = (
                check_propensities(propensities) if propensities is not None else resolve_propensities(data, nuisance_config, folds)
            )
        if estimator == "dr":
            model = fit_reward_model_plain(data, None, folds, nuisance_config.reg)
            self.q_current = predict_reward(model, data, None, folds)
        elif estimator == "dolce":
            self.nuisances = fit_nuisances(data, policy, folds, nuisance_config, use_mtri=use_mtri)
        elif estimator != "ips":
            raise InvalidInputException(f"unknown gradient estimator '{estimator}'")
        self.lag_scores: list[LagScoreModels] = []

    def refit(self, policy: LinearSoftmaxPolicy):
        if self.nuisances is None:
            return
        lags = [refresh_target_marginal(n, self.data, policy, self.folds, self.config) for n in self.nuisances.lags]
        self.nuisances = self.nuisances.model_copy(update={"lags": lags})
        self.lag_scores = [
            fit_lag_score_marginal(
                self.data, policy, n.lag, self.folds, self.config.reg, self.config.p_min, marginal=n.target_marginal
            )
            for n in lags
        ]

    def gradient(self, policy: LinearSoftmaxPolicy) -> np.ndarray:
        if self.estimator == "ips":
            return grad_ips(self.data, policy, self.propensities)
        if self.estimator == "dr":
            return grad_dr(self.data, policy, self.q_current, self.propensities)
        if not self.lag_scores:
            self.refit(policy)
        return grad_dolce_softmin(self.data, policy, self.nuisances, self.lag_scores, self.config.tau)


class TrainingRun(ArraySchema):
    policy: LinearSoftmaxPolicy
    initial: LinearSoftmaxPolicy
    trajectory: np.ndarray
    grad_norms: np.ndarray
    first_gradient: np.ndarray
    estimator: str


def train_policy(
    data: LaggedDataset,
    train_config: TrainConfig,
    nuisance_config: NuisanceConfig,
    folds: FoldAssignment,
    initial: Optional[LinearSoftmaxPolicy] = None,
    estimator: Optional[str] = None,
    propensities: Optional[np.ndarray] = None,
) -> TrainingRun:
    """theta_{t+1} = theta_t + step_size * g(theta_t) for ``steps`` iterations."""
    name = estimator or train_config.estimator
    policy = initial or initial_policy(data.num_actions, data.d, train_config)
    start = policy
    oracle = GradientOracle(data, name, nuisance_config, folds, policy, train_config.use_mtri, propensities)
    trajectory = [policy.theta.ravel().copy()]
    grad_norms = []
    first_gradient = None
    for step in range(train_config.steps):
        if name == "dolce" and step % train_config.refit_every == 0:
            oracle.refit(policy)
        gradient = oracle.gradient(policy)
        if not np.all(np.isfinite(gradient)):
            raise NumericException(f"{name} gradient is not finite at step {step}")
        if first_gradient is None:
            first_gradient = gradient
        grad_norms.append(float(np.linalg.norm(gradient)))
        policy = policy.with_theta(policy.theta.ravel() + train_config.step_size * gradient)
        trajectory.append(policy.theta.ravel().copy())
    logger.debug(f"Trained {name} policy for {train_config.steps} steps, final gradient norm {grad_norms[-1]:.3e}")
    return TrainingRun(
        policy=policy,
        initial=start,
        trajectory=np.array(trajectory),
        grad_norms=np.array(grad_norms),
        first_gradient=first_gradient,
        estimator=name,
    )


class OplMetrics(BaseSchema):
    ni: Optional[float]
    osi: float
    regret: float


def opl_metrics(
    learned: Policy,
    logging_probs: np.ndarray,
    test_x: np.ndarray,
    test_q: np.ndarray,
    initial: LinearSoftmaxPolicy,
    initial_gradient: np.ndarray,
    step_size: float,
) -> OplMetrics:
    """NI, OSI and regret against the exact mean rewards of a test set."""
    best = float(np.mean(np.max(test_q, axis=1)))
    logging_value = policy_value(logging_probs, test_q)
    learned_value = policy_value(learned.probs(test_x), test_q)
    gap = best - logging_value
    ni = None if gap == 0.0 else (learned_value - logging_value) / gap
    stepped = initial.with_theta(initial.theta.ravel() + step_size * np.asarray(initial_gradient))
    osi = policy_value(stepped.probs(test_x), test_q) - policy_value(initial.probs(test_x), test_q)
    return OplMetrics(ni=ni, osi=osi, regret=best - learned_value)
