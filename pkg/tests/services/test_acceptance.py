from pathlib import Path

import numpy as np
import pytest
from scipy.stats import spearmanr

from config.experiment import load_experiment
from shared.seeding import make_rng
from src.models.policy import LinearSoftmaxPolicy, TabularPolicy
from src.repositories.env import load_fixture
from src.schemas.experiment import NuisanceConfig
from src.schemas.synth import SynthConfig
from src.services import oracle, synthgen
from src.services.nuisance import fit_nuisances, kfold_split
from src.services.sweep import SweepService

FIXTURES_DIR = Path(__file__).resolve().parents[1] / "fixtures" / "oracle"


@pytest.mark.slow
class TestMonteCarloAcceptance:
    """Monte Carlo checks of the exact identities; run with -m slow"""

    def test_dolce_unbiased_where_ips_is_not(self):
        """Test oracle DOLCE centers on V while IPS misses the unsupported reward"""
        # Mock
        fixture = load_fixture(FIXTURES_DIR / "current_violation.json")
        env = fixture.env
        policy = TabularPolicy(table=fixture.target)
        q_tilde = oracle.residual_invariant_q_tilde(env, fixture.delta)
        weights = oracle.oracle_lag_weights(env, policy)
        current = np.divide(fixture.target, env.pi0, out=np.zeros_like(fixture.target), where=env.pi0 > 0.0)
        replications, n = 200, 5000

        # Execute
        dolce, ips = [], []
        for replication in range(replications):
            draw = oracle.sample(env, n, make_rng(7, replication))
            actions, rewards = draw.dataset.actions, draw.dataset.rewards
            pi = fixture.target[draw.x_index]
            model = np.einsum("na,na->n", pi, q_tilde[draw.x_index, draw.x0_index])
            taken = q_tilde[draw.x_index, draw.x0_index, actions]
            dolce.append(np.mean(weights[draw.x0_index, actions] * (rewards - taken) + model))
            ips.append(np.mean(current[draw.x_index, actions] * rewards))

        # Assertions
        value = oracle.exact_value(env, policy)
        dolce, ips = np.array(dolce), np.array(ips)
        dolce_se = dolce.std(ddof=1) / np.sqrt(replications)
        ips_se = ips.std(ddof=1) / np.sqrt(replications)
        assert abs(dolce.mean() - value) < 3 * dolce_se
        assert abs(ips.mean() - value) > 10 * ips_se
        assert ips.mean() - value == pytest.approx(oracle.exact_bias_ips(env, policy), abs=5 * ips_se)

    def test_sampled_dolce_gradient_matches_exact_gradient(self):
        """Test the oracle DOLCE gradient sample mean per coordinate"""
        # Mock
        rng = make_rng(21)
        env = oracle.random_env(rng, d=2)
        policy = LinearSoftmaxPolicy(theta=0.5 * rng.standard_normal((env.num_actions, 3)))
        q_tilde = oracle.residual_invariant_q_tilde(env, rng.standard_normal((env.num_lag_contexts, env.num_actions)))
        weights = oracle.oracle_lag_weights(env, policy)
        lag_scores = oracle.exact_lag_score_marginal(env, policy)
        pi_table = policy.probs(env.features)
        score_table = policy.scores(env.features)
        n = 100_000

        # Execute
        draw = oracle.sample(env, n, make_rng(22))
        actions, rewards = draw.dataset.actions, draw.dataset.rewards
        taken = q_tilde[draw.x_index, draw.x0_index, actions]
        correction = (weights[draw.x0_index, actions] * (rewards - taken))[:, None] * lag_scores[draw.x0_index, actions]
        model = np.einsum(
            "na,na,nam->nm",
            pi_table[draw.x_index],
            q_tilde[draw.x_index, draw.x0_index],
            score_table[draw.x_index],
        )
        psi = correction + model

        # Assertions
        se = psi.std(axis=0, ddof=1) / np.sqrt(n)
        gap = np.abs(psi.mean(axis=0) - oracle.exact_gradient(env, policy))
        assert np.all(gap < 3 * se + 1e-12)


@pytest.mark.slow
class TestSyntheticAcceptance:
    """Ordinal checks on the synthetic benchmark; run with -m slow"""

    @pytest.mark.asyncio
    async def test_dolce_bias_below_ips_under_violation(self, tmp_path):
        """Test |bias| of DOLCE is below IPS once the violation region is large"""
        # Mock
        config = load_experiment(
            overrides=[
                "synth.n=2000",
                "sweep.grid=[0.7]",
                "sweep.replications=30",
                "sweep.estimators=[\"ips\", \"dr\", \"dolce\"]",
                "sweep.truth_samples=100000",
            ]
        )
        service = SweepService(config, output_dir=tmp_path, jobs=2)

        # Execute
        summary = await service.cmd_synth_ope()

        # Assertions
        bias = {row["estimator"]: abs(row["bias"]) for row in summary}
        assert bias["dolce"] < bias["ips"]

    @staticmethod
    def _by_estimator(summary: list[dict]) -> dict[str, dict[float, dict]]:
        out: dict[str, dict[float, dict]] = {}
        for row in summary:
            out.setdefault(row["estimator"], {})[row["value"]] = row
        return out

    @pytest.mark.asyncio
    async def test_ips_bias_and_coverage_track_violation_ratio(self, tmp_path):
        """Test IPS bias falls with r while DOLCE keeps its coverage and IPS loses it"""
        # Mock
        grid = [0.0, 0.3, 0.5, 0.7]
        config = load_experiment(
            overrides=[
                "synth.n=2000",
                f"sweep.grid={grid}",
                "sweep.replications=40",
                "sweep.estimators=[\"ips\", \"dolce\"]",
                "sweep.truth_samples=100000",
            ]
        )
        service = SweepService(config, output_dir=tmp_path, jobs=2)

        # Execute
        summary = self._by_estimator(await service.cmd_synth_ope())

        # Assertions
        ips_bias = [summary["ips"][r]["bias"] for r in grid]
        assert all(bias < 0.0 for bias in ips_bias[1:])
        assert spearmanr(grid, ips_bias).statistic <= -0.8
        assert all(summary["dolce"][r]["coverage"] >= 0.85 for r in grid)
        assert all(summary["ips"][r]["coverage"] < 0.85 for r in grid if r >= 0.5)

    @pytest.mark.asyncio
    async def test_dolce_coverage_at_half_violation(self, tmp_path):
        """Test the nominal 95% interval of DOLCE covers between 90% and 99% of the time at r = 0.5"""
        # Mock
        config = load_experiment(
            overrides=[
                "sweep.grid=[0.5]",
                "sweep.replications=200",
                "sweep.estimators=[\"dolce\"]",
                "sweep.truth_samples=200000",
            ]
        )
        service = SweepService(config, output_dir=tmp_path, jobs=2)

        # Execute
        summary = await service.cmd_synth_ope()

        # Assertions
        assert 0.90 <= summary[0]["coverage"] <= 0.99

    @pytest.mark.asyncio
    async def test_moment_penalty_lowers_alc_without_extra_bias(self, tmp_path):
        """Test the penalized reward model lowers mean ALC across seeds and keeps |bias| within one pooled SE"""
        # Mock
        nuisance = NuisanceConfig()
        config = load_experiment(
            overrides=[
                "synth.interaction_eta=0.0",
                "sweep.grid=[0.5]",
                "sweep.replications=50",
                "sweep.estimators=[\"dolce\", \"dolce_mtri\"]",
                "sweep.truth_samples=100000",
            ]
        )
        service = SweepService(config, output_dir=tmp_path, jobs=2)

        # Execute
        plain_alc, mtri_alc = [], []
        for env_seed in range(20):
            synth = SynthConfig(violation_ratio=0.5, interaction_eta=0.0, env_seed=env_seed, data_seed=env_seed)
            env = synthgen.make_env(synth)
            data = synthgen.generate(synth, env)
            policy = synthgen.target_policy(synth, env)
            folds = kfold_split(data.n, nuisance.k_folds, env_seed)
            plain_alc.append(fit_nuisances(data, policy, folds, nuisance, use_mtri=False).alc[0])
            mtri_alc.append(fit_nuisances(data, policy, folds, nuisance, use_mtri=True).alc[0])
        summary = {row["estimator"]: row for row in await service.cmd_synth_ope()}

        # Assertions
        assert np.mean(mtri_alc) <= np.mean(plain_alc)
        plain, mtri = summary["dolce"], summary["dolce_mtri"]
        pooled_se = np.sqrt((plain["variance"] + mtri["variance"]) / plain["replications"])
        assert abs(mtri["bias"]) <= abs(plain["bias"]) + pooled_se

    @pytest.mark.asyncio
    async def test_dolce_policy_learning_beats_ips_under_violation(self, tmp_path):
        """Test DOLCE-trained policies improve at least as much as IPS ones and lose less as r grows"""
        # Mock
        grid = [0.0, 0.5, 0.7]
        config = load_experiment(
            overrides=[
                f"sweep.grid={grid}",
                "sweep.replications=20",
                "sweep.estimators=[\"ips\", \"dolce\"]",
                "sweep.test_samples=5000",
                "train.steps=100",
            ]
        )
        service = SweepService(config, output_dir=tmp_path, jobs=2)

        # Execute
        summary = self._by_estimator(await service.cmd_synth_opl())

        # Assertions
        dolce, ips = summary["dolce"], summary["ips"]
        assert dolce[0.7]["ni"] >= ips[0.7]["ni"]
        assert all(dolce[r]["osi"] >= ips[r]["osi"] for r in grid if r >= 0.5)
        dolce_slope = np.polyfit(grid, [dolce[r]["regret"] for r in grid], 1)[0]
        ips_slope = np.polyfit(grid, [ips[r]["regret"] for r in grid], 1)[0]
        assert dolce_slope < ips_slope
