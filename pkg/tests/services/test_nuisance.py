from unittest.mock import patch

import numpy as np
import pytest

from shared.seeding import make_rng
from src.exceptions.custom_exceptions import InvalidConfigException, InvalidInputException
from src.models.base import FoldModels
from src.models.policy import LinearSoftmaxPolicy, UniformPolicy
from src.models.reward import RewardModel, fit_mtri_reward, reward_features
from src.schemas.dataset import LaggedDataset
from src.schemas.experiment import NuisanceConfig
from src.schemas.synth import SynthConfig
from src.services import synthgen
from src.services.nuisance import (
    action_means,
    estimate_alc,
    fit_critics,
    fit_current_propensity,
    fit_lag_propensity,
    fit_lag_target_marginal,
    fit_nuisances,
    fit_reward_model_mtri,
    fit_reward_model_plain,
    kfold_split,
    lag_weight,
    lag_weights,
    nuisance_diagnostics,
    predict_lag_propensity,
    predict_lag_target_marginal,
    predict_reward,
    refresh_target_marginal,
)


@pytest.fixture
def synth_data():
    """Small synthetic dataset with one lag"""
    config = SynthConfig(n=400, d=4, num_actions=3, violation_ratio=0.2, env_seed=5, data_seed=6)
    env = synthgen.make_env(config)
    return synthgen.generate(config, env), synthgen.target_policy(config, env)


@pytest.fixture
def two_lag_data(synth_data):
    """The synthetic dataset with an extra, uninformative lag appended"""
    data, policy = synth_data
    noise = make_rng(99).standard_normal((data.n, 1, data.d))
    return (
        LaggedDataset(
            x=data.x,
            x_lags=np.concatenate([data.x_lags, noise], axis=1),
            actions=data.actions,
            rewards=data.rewards,
            num_actions=data.num_actions,
            propensities=data.propensities,
            lag_labels=["1", "5"],
        ),
        policy,
    )


@pytest.fixture
def config():
    """Nuisance configuration used across tests"""
    return NuisanceConfig(k_folds=2, clip=10.0, p_min=1e-3)


class TestFoldSplit:
    """Test suite for cross-fitting fold assignment"""

    def test_folds_are_balanced_and_deterministic(self):
        """Test fold sizes differ by at most one and the seed pins the split"""
        # Execute
        first = kfold_split(101, 5, seed=3)
        second = kfold_split(101, 5, seed=3)

        # Assertions
        sizes = np.bincount(first.fold_of)
        assert sizes.max() - sizes.min() <= 1
        assert np.array_equal(first.fold_of, second.fold_of)

    def test_replication_key_changes_split(self):
        """Test extra keys select a different stream"""
        # Execute
        first = kfold_split(100, 2, 3, 0)
        second = kfold_split(100, 2, 3, 1)

        # Assertions
        assert not np.array_equal(first.fold_of, second.fold_of)

    def test_train_and_test_partition(self):
        """Test train and test indices of a fold partition the sample"""
        # Mock
        folds = kfold_split(20, 4, seed=0)

        # Execute
        train, test = folds.train_indices(1), folds.test_indices(1)

        # Assertions
        assert np.array_equal(np.sort(np.concatenate([train, test])), np.arange(20))
        assert np.intersect1d(train, test).size == 0

    def test_single_fold_rejected(self):
        """Test K = 1"""
        # Execute and assert exception
        with pytest.raises(InvalidConfigException) as exc_info:
            kfold_split(10, 1, seed=0)

        assert exc_info.value.keys == ["nuisance.k_folds"]

    def test_too_few_samples(self):
        """Test n < 2K"""
        # Execute and assert exception
        with pytest.raises(InvalidInputException) as exc_info:
            kfold_split(5, 3, seed=0)

        assert "cannot be split" in str(exc_info.value)


class TestNuisanceModels:
    """Test suite for cross-fitted propensity, target marginal and reward models"""

    def test_action_means_fall_back_to_overall_mean(self):
        """Test an unlogged action gets the overall mean reward"""
        # Mock
        data = LaggedDataset(x=[[0.0], [1.0], [2.0]], x_lags=np.zeros((3, 0, 1)), actions=[0, 0, 1], rewards=[1.0, 3.0, 5.0], num_actions=3)

        # Execute
        means = action_means(data)

        # Assertions
        assert np.allclose(means, [2.0, 5.0, 3.0])

    def test_lag_propensity_rows_on_floored_simplex(self, synth_data, config):
        """Test out-of-fold lag propensities are floored probability rows"""
        # Mock
        data, _ = synth_data
        folds = kfold_split(data.n, 2, seed=0)

        # Execute
        models = fit_lag_propensity(data, 0, folds, config.logit_reg, config.p_min)
        bar_0 = predict_lag_propensity(models, data, 0, folds)

        # Assertions
        assert bar_0.shape == (data.n, data.num_actions)
        assert np.allclose(bar_0.sum(axis=1), 1.0)
        assert np.all(bar_0 >= config.p_min - 1e-15)

    def test_missing_lag_index(self, synth_data, config):
        """Test a lag index the dataset does not have"""
        # Mock
        data, _ = synth_data
        folds = kfold_split(data.n, 2, seed=0)

        # Execute and assert exception
        with pytest.raises(InvalidInputException) as exc_info:
            fit_lag_propensity(data, 1, folds, config.logit_reg, config.p_min)

        assert "lag index 1 not present" in str(exc_info.value)

    def test_target_marginal_of_uniform_policy(self, synth_data, config):
        """Test the lag marginal of a uniform target is uniform"""
        # Mock
        data, _ = synth_data
        folds = kfold_split(data.n, 2, seed=0)

        # Execute
        models = fit_lag_target_marginal(data, UniformPolicy(num_actions=3), 0, folds, config.reg)
        bar_theta = predict_lag_target_marginal(models, data, 0, folds, config.p_min)

        # Assertions
        assert np.allclose(bar_theta, 1.0 / 3.0, atol=1e-8)

    def test_lag_weights_are_clipped(self):
        """Test weights are the ratio of taken-action marginals, capped at the clip"""
        # Mock
        bar_theta = np.array([[0.9, 0.1], [0.5, 0.5]])
        bar_0 = np.array([[0.1, 0.9], [0.5, 0.5]])

        # Execute
        weights = lag_weights(bar_theta, bar_0, np.array([0, 1]), clip=4.0)

        # Assertions
        assert np.allclose(weights, [4.0, 1.0])

    def test_lag_weights_grow_with_clip(self):
        """Test clipped weights are nondecreasing in the clip and never exceed it"""
        # Mock
        rng = make_rng(31)
        bar_theta = rng.dirichlet(np.ones(3), size=50)
        bar_0 = rng.dirichlet(np.ones(3), size=50)
        actions = rng.integers(0, 3, size=50)

        # Execute
        clipped = [lag_weights(bar_theta, bar_0, actions, clip) for clip in (0.5, 1.0, 2.0, 8.0, np.inf)]

        # Assertions
        for lower, upper in zip(clipped, clipped[1:]):
            assert np.all(lower <= upper)
        assert np.all(clipped[0] <= 0.5)
        assert np.array_equal(clipped[-1], bar_theta[np.arange(50), actions] / bar_0[np.arange(50), actions])

    def test_reward_predictions_are_out_of_fold(self, synth_data, config):
        """Test rewards in a fold never influence that fold's own predictions"""
        # Mock
        data, _ = synth_data
        folds = kfold_split(data.n, 2, seed=0)
        held = folds.test_indices(0)
        perturbed_rewards = np.array(data.rewards)
        perturbed_rewards[held] += 100.0
        perturbed = data.model_copy(update={"rewards": perturbed_rewards})

        # Execute
        original = predict_reward(fit_reward_model_plain(data, 0, folds, config.reg), data, 0, folds)
        shifted = predict_reward(fit_reward_model_plain(perturbed, 0, folds, config.reg), perturbed, 0, folds)

        # Assertions
        assert np.array_equal(original[held], shifted[held])
        assert not np.array_equal(original[folds.test_indices(1)], shifted[folds.test_indices(1)])

    def test_current_propensity_taken_actions(self, synth_data, config):
        """Test the fitted current-context propensity of each taken action"""
        # Mock
        data, _ = synth_data
        folds = kfold_split(data.n, 2, seed=0)

        # Execute
        propensities = fit_current_propensity(data, folds, config)

        # Assertions
        assert propensities.shape == (data.n,)
        assert np.all((propensities > 0.0) & (propensities <= 1.0))


class TestNuisanceSet:
    """Test suite for the per-lag nuisance bundle"""

    def test_fit_every_lag(self, two_lag_data, config):
        """Test one nuisance per lag with bounded weights and nonnegative ALC"""
        # Mock
        data, policy = two_lag_data
        folds = kfold_split(data.n, 2, seed=1)

        # Execute
        nuisances = fit_nuisances(data, policy, folds, config)

        # Assertions
        assert [n.label for n in nuisances.lags] == ["1", "5"]
        for nuisance in nuisances.lags:
            assert nuisance.weights.shape == (data.n,)
            assert np.all(nuisance.weights <= config.clip)
            assert np.all(nuisance.weights > 0.0)
            assert nuisance.alc >= 0.0
            assert nuisance.q_hat.shape == (data.n, data.num_actions)

    def test_no_lags_rejected(self, synth_data, config):
        """Test lag-aware nuisances on a dataset without lags"""
        # Mock
        data, policy = synth_data
        folds = kfold_split(data.n, 2, seed=1)

        # Execute and assert exception
        with pytest.raises(InvalidInputException) as exc_info:
            fit_nuisances(data.without_lags(), policy, folds, config)

        assert "no lag columns" in str(exc_info.value)

    def test_unknown_lag_lookup(self, synth_data, config):
        """Test for_lag on a lag that was not fitted"""
        # Mock
        data, policy = synth_data
        nuisances = fit_nuisances(data, policy, kfold_split(data.n, 2, seed=1), config)

        # Execute and assert exception
        with pytest.raises(InvalidInputException) as exc_info:
            nuisances.for_lag(3)

        assert "no nuisances fitted for lag index 3" in str(exc_info.value)

    def test_scalar_weight_matches_vector(self, synth_data, config):
        """Test lag_weight on one sample reproduces the stored out-of-fold weight"""
        # Mock
        data, policy = synth_data
        folds = kfold_split(data.n, 2, seed=1)
        nuisances = fit_nuisances(data, policy, folds, config)
        i = 17

        # Execute
        weight = lag_weight(nuisances, 0, int(folds.fold_of[i]), data.lag(0)[i], int(data.actions[i]))

        # Assertions
        assert weight == pytest.approx(nuisances.for_lag(0).weights[i], rel=1e-10)

    def test_refresh_keeps_logging_side(self, synth_data, config):
        """Test refitting for a new target policy leaves the logging marginal alone"""
        # Mock
        data, policy = synth_data
        folds = kfold_split(data.n, 2, seed=1)
        nuisance = fit_nuisances(data, policy, folds, config).for_lag(0)
        softmax = LinearSoftmaxPolicy(theta=np.zeros((3, data.d + 1)))

        # Execute
        refreshed = refresh_target_marginal(nuisance, data, softmax, folds, config)

        # Assertions
        assert np.array_equal(refreshed.bar_pi_0, nuisance.bar_pi_0)
        assert np.allclose(refreshed.bar_pi_theta, 1.0 / 3.0, atol=1e-8)
        assert not np.array_equal(refreshed.weights, nuisance.weights)

    def test_zero_penalty_mtri_matches_plain(self, synth_data):
        """Test the moment-penalized nuisance with penalty 0 gives the plain reward predictions"""
        # Mock
        data, policy = synth_data
        folds = kfold_split(data.n, 2, seed=1)
        config = NuisanceConfig(k_folds=2, mtri_penalty=0.0)

        # Execute
        plain = fit_nuisances(data, policy, folds, config, use_mtri=False)
        mtri = fit_nuisances(data, policy, folds, config, use_mtri=True)

        # Assertions
        assert np.array_equal(plain.for_lag(0).q_hat, mtri.for_lag(0).q_hat)
        assert mtri.for_lag(0).critics is not None

    def test_diagnostics_report_per_lag(self, two_lag_data, config):
        """Test diagnostics carry weight quantiles and clip rates per lag"""
        # Mock
        data, policy = two_lag_data
        nuisances = fit_nuisances(data, policy, kfold_split(data.n, 2, seed=1), config)

        # Execute
        report = nuisance_diagnostics(nuisances, ess_by_lag=[10.0, 20.0])

        # Assertions
        assert report["clip"] == config.clip
        assert [entry["lag"] for entry in report["lags"]] == ["1", "5"]
        first = report["lags"][0]
        assert set(first["weight_quantiles"]) == {"0.5", "0.9", "0.99"}
        assert 0.0 <= first["clip_rate"] <= 1.0
        assert first["ess"] == 10.0


def _zero_reward_models(x: np.ndarray, x_lag: np.ndarray, num_actions: int, num_folds: int) -> FoldModels:
    width = reward_features(x[:1], x_lag[:1]).shape[1]
    zero = RewardModel(coef=np.zeros((num_actions, width)), intercept=np.zeros(num_actions))
    return FoldModels(models=[zero] * num_folds)


class TestRewardNuisances:
    """Test suite for lag-conditioning violation scores and moment-penalized reward fits"""

    @pytest.fixture
    def independent_contexts(self):
        """Current and lag contexts drawn independently, two actions"""
        rng = make_rng(41)
        n = 2000
        return rng.standard_normal((n, 2)), rng.standard_normal((n, 2)), rng.integers(0, 2, size=n), rng

    def _dataset(self, x, x_lag, actions, rewards):
        return LaggedDataset(x=x, x_lags=x_lag[:, None, :], actions=actions, rewards=rewards, num_actions=2)

    def test_alc_small_when_residual_depends_on_lag_only(self, independent_contexts):
        """Test a residual explained by the lag context has a near-zero violation score"""
        # Mock
        x, x_lag, actions, rng = independent_contexts
        rewards = x_lag[:, 0] ** 2 + 0.1 * rng.standard_normal(x.shape[0])
        data = self._dataset(x, x_lag, actions, rewards)
        folds = kfold_split(data.n, 2, seed=0)

        # Execute
        alc = estimate_alc(data, 0, folds, _zero_reward_models(x, x_lag, 2, 2), 1e-3)

        # Assertions
        assert 0.0 <= alc < 1e-2

    def test_alc_large_when_residual_depends_on_current_context(self, independent_contexts):
        """Test a residual driven by the current context is picked up by the full projection"""
        # Mock
        x, x_lag, actions, rng = independent_contexts
        rewards = x[:, 0] ** 2 + 0.1 * rng.standard_normal(x.shape[0])
        data = self._dataset(x, x_lag, actions, rewards)
        folds = kfold_split(data.n, 2, seed=0)

        # Execute
        alc = estimate_alc(data, 0, folds, _zero_reward_models(x, x_lag, 2, 2), 1e-3)

        # Assertions
        assert alc > 0.5

    def test_alc_nonnegative_on_benchmark(self, synth_data, config):
        """Test the score of a fitted reward model on the synthetic benchmark"""
        # Mock
        data, _ = synth_data
        folds = kfold_split(data.n, 2, seed=0)
        reward = fit_reward_model_plain(data, 0, folds, config.reg)

        # Execute
        alc = estimate_alc(data, 0, folds, reward, config.reg)

        # Assertions
        assert np.isfinite(alc)
        assert alc >= 0.0

    def test_mtri_with_zero_penalty_matches_plain_models(self, synth_data, config):
        """Test the cross-fitted penalized reward models reduce to the plain ones at penalty 0"""
        # Mock
        data, _ = synth_data
        folds = kfold_split(data.n, 2, seed=2)
        critics = fit_critics(data, 0, folds, config.reg)

        # Execute
        plain = fit_reward_model_plain(data, 0, folds, config.reg)
        mtri = fit_reward_model_mtri(data, 0, folds, critics, 0.0, config.reg)

        # Assertions
        for plain_model, mtri_model in zip(plain.models, mtri.models):
            assert np.array_equal(plain_model.coef, mtri_model.coef)
            assert mtri_model.variant == "mtri"

    def test_mtri_uses_out_of_fold_critic_centering(self, synth_data, config):
        """Test each fold's reward fit sees critics centered by models that never trained on those rows"""
        # Mock
        data, _ = synth_data
        folds = kfold_split(data.n, 2, seed=2)
        critics = fit_critics(data, 0, folds, config.reg)
        x_lag = data.lag(0)
        train = folds.train_indices(0)

        # Execute
        with patch("src.services.nuisance.fit_mtri_reward", wraps=fit_mtri_reward) as mock_fit:
            fit_reward_model_mtri(data, 0, folds, critics, 1.0, config.reg)

        # Assertions
        assert mock_fit.call_count == 2
        passed = mock_fit.call_args_list[0].args[8]
        held_out = critics.models[1].centered_taken(data.x[train], x_lag[train], data.actions[train])
        in_fold = critics.models[0].centered_taken(data.x[train], x_lag[train], data.actions[train])
        assert np.allclose(passed, held_out, rtol=0.0, atol=1e-12)
        assert not np.allclose(passed, in_fold)

    def test_penalty_lowers_moment_violation_of_each_fold(self, synth_data, config):
        """Test a large penalty reduces the weighted moment term on every fold's training rows"""
        # Mock
        data, _ = synth_data
        folds = kfold_split(data.n, 2, seed=2)
        critics = fit_critics(data, 0, folds, config.reg)
        x_lag = data.lag(0)
        centered = critics.predict_out_of_fold(
            folds, lambda model, rows: model.centered_taken(data.x[rows], x_lag[rows], data.actions[rows])
        )

        def moment_term(model, rows):
            residual = data.rewards[rows] - model.predict_taken(data.x[rows], x_lag[rows], data.actions[rows])
            total = 0.0
            for a in range(data.num_actions):
                block = centered[rows][data.actions[rows] == a]
                moment = block.T @ residual[data.actions[rows] == a]
                gram = block.T @ block + block.shape[0] * 1e-6 * np.eye(block.shape[1])
                total += float(moment @ np.linalg.solve(gram, moment))
            return total

        # Execute
        plain = fit_reward_model_mtri(data, 0, folds, critics, 0.0, config.reg)
        penalized = fit_reward_model_mtri(data, 0, folds, critics, 1e3, config.reg)

        # Assertions
        for j in range(folds.num_folds):
            rows = folds.train_indices(j)
            assert moment_term(penalized.models[j], rows) < moment_term(plain.models[j], rows)
