#synthgen.py
"""Synthetic lagged contextual bandit with injectable current-context support violations.

The lag context is N(0, I); the current context is N(rho * lag, 9 I) with its
first coordinate redrawn independently, so forcing A = 0 on the top-r tail of
that coordinate removes current-context overlap while lag overlap survives.
"""
import logging
from functools import partial
from typing import Optional

import numpy as np
from scipy.special import softmax

from shared.seeding import DATA_STREAM, ENV_STREAM, TRUTH_STREAM, make_rng
from src.exceptions.custom_exceptions import InvalidInputException
from src.models.policy import EpsGreedyScoresPolicy, Policy
from src.schemas.dataset import LaggedDataset
from src.schemas.synth import SynthBatch, SynthConfig, SynthEnv

logger = logging.getLogger(__name__)

BASELINE_CONTRAST = -0.2
COUNT_PENALTY_BASELINE = -0.3
COUNT_BONUS_OTHER = 0.15
FEATURE_THRESHOLD = 0.5
COUNT_THRESHOLD = 2
COEF_BOUND = 0.5
CURRENT_SCALE = 3.0
MC_CHUNK = 100_000


def make_env(config: SynthConfig) -> SynthEnv:
    rng = make_rng(config.env_seed, ENV_STREAM)
    shape = (config.num_actions, config.d - 1)
    g_coef = rng.uniform(-COEF_BOUND, COEF_BOUND, size=shape)
    h_coef = rng.uniform(-COEF_BOUND, COEF_BOUND, size=shape)
    u_coef = rng.uniform(-COEF_BOUND, COEF_BOUND, size=(config.num_actions, 3))
    g_coef[0] = BASELINE_CONTRAST
    h_coef[0] = BASELINE_CONTRAST
    count_effect = np.full(config.num_actions, COUNT_BONUS_OTHER)
    count_effect[0] = COUNT_PENALTY_BASELINE
    return SynthEnv(
        env_seed=config.env_seed,
        g_coef=g_coef,
        h_coef=h_coef,
        u_coef=u_coef,
        count_effect=count_effect,
    )


def threshold_effect(features: np.ndarray, coef: np.ndarray, count_effect: np.ndarray) -> np.ndarray:
    """Piecewise-constant effect (n, |A|): +c above the threshold, -c below, plus the count term."""
    signs = np.where(features[:, 1:] > FEATURE_THRESHOLD, 1.0, -1.0)
    effect = signs @ coef.T
    count = np.sum(features[:, 2:] > FEATURE_THRESHOLD, axis=1)
    return effect + np.where(count >= COUNT_THRESHOLD, 1.0, 0.0)[:, None] * count_effect[None, :]


def current_scores(env: SynthEnv, x: np.ndarray) -> np.ndarray:
    """g(x, .)"""
    return threshold_effect(np.atleast_2d(x), env.g_coef, env.count_effect)


def lag_scores(env: SynthEnv, x_lag: np.ndarray) -> np.ndarray:
    """h(x^(1), .)"""
    return threshold_effect(np.atleast_2d(x_lag), env.h_coef, env.count_effect)


def interaction_scores(env: SynthEnv, x: np.ndarray, x_lag: np.ndarray) -> np.ndarray:
    """u(x, x^(1), .)"""
    x, x_lag = np.atleast_2d(x), np.atleast_2d(x_lag)
    return (
        (x[:, 1] * x_lag[:, 1])[:, None] * env.u_coef[:, 0]
        + (x[:, 2] * x_lag[:, 2])[:, None] * env.u_coef[:, 1]
        + np.sin(x[:, 3] + x_lag[:, 3])[:, None] * env.u_coef[:, 2]
    )


def mean_reward_table(
    env: SynthEnv,
    x: np.ndarray,
    x_lag: np.ndarray,
    mix_lambda: float,
    interaction_eta: float,
) -> np.ndarray:
    return (
        mix_lambda * current_scores(env, x)
        + (1.0 - mix_lambda) * lag_scores(env, x_lag)
        + interaction_eta * interaction_scores(env, x, x_lag)
    )


def mean_reward(
    env: SynthEnv,
    x: np.ndarray,
    x_lag: np.ndarray,
    a: int,
    mix_lambda: float,
    interaction_eta: float,
) -> float:
    return float(mean_reward_table(env, x, x_lag, mix_lambda, interaction_eta)[0, a])


def violation_threshold(first_coordinate: np.ndarray, violation_ratio: float) -> float:
    if violation_ratio <= 0.0:
        return float("inf")
    return float(np.quantile(first_coordinate, 1.0 - violation_ratio))


def logging_policy_probs(
    env: SynthEnv,
    x: np.ndarray,
    beta: float,
    threshold: float,
    exploration_floor: float = 0.0,
) -> np.ndarray:
    """pi_0(. | x): one-hot on action 0 when x_1 > c_r, else softmax(beta g) mixed with uniform."""
    single = np.ndim(x) == 1
    batch = np.atleast_2d(x)
    probs = softmax(beta * current_scores(env, batch), axis=1)
    if exploration_floor > 0.0:
        probs = (1.0 - exploration_floor) * probs + exploration_floor / env.num_actions
    violated = batch[:, 0] > threshold
    probs[violated] = 0.0
    probs[violated, 0] = 1.0
    return probs[0] if single else probs


def draw_contexts(rng: np.random.Generator, m: int, config: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    x_lag = rng.standard_normal((m, config.d))
    x = config.lag_rho * x_lag + CURRENT_SCALE * rng.standard_normal((m, config.d))
    x[:, 0] = CURRENT_SCALE * rng.standard_normal(m)
    return x, x_lag


def sample_actions(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    draws = rng.random(probs.shape[0])
    return np.minimum(np.sum(draws[:, None] >= cdf, axis=1), probs.shape[1] - 1)


def draw(
    config: SynthConfig,
    env: SynthEnv,
    replication: int = 0,
    n: Optional[int] = None,
    stream: int = DATA_STREAM,
    exploration_floor: float = 0.0,
) -> SynthBatch:
    rng = make_rng(config.data_seed, stream, replication)
    size = n if n is not None else config.n
    x, x_lag = draw_contexts(rng, size, config)
    threshold = violation_threshold(x[:, 0], config.violation_ratio)
    probs = logging_policy_probs(env, x, config.logging_beta, threshold, exploration_floor)
    actions = sample_actions(rng, probs)
    q = mean_reward_table(env, x, x_lag, config.mix_lambda, config.interaction_eta)
    rows = np.arange(size)
    rewards = q[rows, actions] + rng.standard_normal(size)
    violation = x[:, 0] > threshold
    logger.debug(f"Generated {size} samples, threshold {threshold:.4f}, {violation.mean():.3f} in violation region")
    dataset = LaggedDataset(
        x=x,
        x_lags=x_lag[:, None, :],
        actions=actions,
        rewards=rewards,
        num_actions=config.num_actions,
        propensities=probs[rows, actions],
        lag_labels=["1"],
    )
    return SynthBatch(
        dataset=dataset,
        threshold=threshold,
        mean_rewards=q,
        logging_probs=probs,
        violation=violation,
    )


def generate(config: SynthConfig, env: SynthEnv, replication: int = 0) -> LaggedDataset:
    return draw(config, env, replication).dataset


def target_policy(config: SynthConfig, env: SynthEnv) -> EpsGreedyScoresPolicy:
    """Epsilon-greedy on the current-context component g only."""
    return EpsGreedyScoresPolicy(
        num_actions=config.num_actions,
        epsilon=config.target_epsilon,
        d=config.d,
        score_fn=partial(current_scores, env),
    )


def monte_carlo_value(
    config: SynthConfig,
    env: SynthEnv,
    policy: Policy,
    m_samples: int,
    key: int = 0,
) -> tuple[float, float]:
    """Return (value, standard error) of sum_a pi(a|X) q(X, X^(1), a) over fresh contexts."""
    if m_samples < 1:
        raise InvalidInputException("m_samples must be at least 1")
    rng = make_rng(config.data_seed, TRUTH_STREAM, key)
    total = 0.0
    total_sq = 0.0
    remaining = m_samples
    while remaining > 0:
        size = min(MC_CHUNK, remaining)
        x, x_lag = draw_contexts(rng, size, config)
        q = mean_reward_table(env, x, x_lag, config.mix_lambda, config.interaction_eta)
        values = np.sum(policy.probs(x) * q, axis=1)
        total += float(values.sum())
        total_sq += float(np.sum(values**2))
        remaining -= size
    mean = total / m_samples
    variance = max(total_sq / m_samples - mean**2, 0.0)
    return mean, float(np.sqrt(variance / m_samples))


def true_value_mc(config: SynthConfig, env: SynthEnv, policy: Policy, m_samples: int) -> float:
    value, se = monte_carlo_value(config, env, policy, m_samples)
    logger.debug(f"Monte Carlo value {value:.6f} (se {se:.2e}) from {m_samples} contexts")
    return value


def mean_rewards_on(config: SynthConfig, env: SynthEnv, test_set: LaggedDataset) -> np.ndarray:
    return mean_reward_table(env, test_set.x, test_set.lag(0), config.mix_lambda, config.interaction_eta)


def oracle_best_value(config: SynthConfig, env: SynthEnv, test_set: LaggedDataset) -> float:
    """V* = mean over the test set of max_a q(X, X^(1), a)."""
    return float(np.mean(np.max(mean_rewards_on(config, env, test_set), axis=1)))


def policy_value(probs: np.ndarray, mean_rewards: np.ndarray) -> float:
    return float(np.mean(np.sum(probs * mean_rewards, axis=1)))
