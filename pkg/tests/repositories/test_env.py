import json
from pathlib import Path

import numpy as np
import pytest

from src.exceptions.custom_exceptions import InvalidInputException, ParseException
from src.models.policy import EpsGreedyScoresPolicy, LinearSoftmaxPolicy
from src.repositories.env import EnvRepository, load_fixture, load_fixtures, load_policy
from src.schemas.oracle import OracleFixture
from src.services.oracle import random_fixture

FIXTURES_DIR = Path(__file__).resolve().parents[1] / "fixtures" / "oracle"


class TestEnvRepository:
    """Test suite for policy specs, environments and oracle fixtures on disk"""

    @pytest.fixture
    def repository(self, tmp_path):
        """EnvRepository rooted in a temporary directory"""
        return EnvRepository(tmp_path)

    def test_load_softmax_policy(self, tmp_path):
        """Test a linear softmax spec file"""
        # Mock
        path = tmp_path / "policy.json"
        path.write_text(json.dumps({"kind": "linear_softmax", "theta": [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]}))

        # Execute
        policy = load_policy(path)

        # Assertions
        assert isinstance(policy, LinearSoftmaxPolicy)
        assert policy.d == 2

    def test_load_eps_greedy_policy(self, tmp_path):
        """Test an eps-greedy spec with linear scores"""
        # Mock
        path = tmp_path / "policy.json"
        path.write_text(json.dumps({"kind": "eps_greedy", "num_actions": 2, "epsilon": 0.2, "score_weights": [[1.0, 0.0], [-1.0, 0.0]]}))

        # Execute
        policy = load_policy(path)

        # Assertions
        assert isinstance(policy, EpsGreedyScoresPolicy)
        assert np.allclose(policy.probs(np.array([[2.0]])), [[0.9, 0.1]])

    def test_unknown_policy_kind(self, tmp_path):
        """Test a spec with an unknown kind"""
        # Mock
        path = tmp_path / "policy.json"
        path.write_text(json.dumps({"kind": "oracle"}))

        # Execute and assert exception
        with pytest.raises(ParseException) as exc_info:
            load_policy(path)

        assert "invalid policy spec" in str(exc_info.value)

    def test_missing_policy_file(self, tmp_path):
        """Test a spec path that does not exist"""
        # Execute and assert exception
        with pytest.raises(InvalidInputException) as exc_info:
            load_policy(tmp_path / "missing.json")

        assert "not found" in str(exc_info.value)

    def test_shipped_fixtures_load(self):
        """Test the bundled oracle fixtures parse and include an expected-bias case"""
        # Execute
        fixtures = load_fixtures(FIXTURES_DIR)

        # Assertions
        assert [f.name for f in fixtures] == ["current_violation", "full_support", "no_lag_overlap"]
        assert {f.expect for f in fixtures} == {"pass", "bias"}

    def test_fixture_rows_must_be_simplex(self, tmp_path):
        """Test a fixture whose logging rows do not sum to one"""
        # Mock
        payload = json.loads((FIXTURES_DIR / "full_support.json").read_text())
        payload["env"]["pi0"][0] = [0.5, 0.6]
        path = tmp_path / "broken.json"
        path.write_text(json.dumps(payload))

        # Execute and assert exception
        with pytest.raises(ParseException) as exc_info:
            load_fixture(path)

        assert "broken.json" in str(exc_info.value)

    @pytest.mark.asyncio
    async def test_fixture_save_and_reload(self, repository, tmp_path):
        """Test a generated fixture written by the repository loads back unchanged"""
        # Mock
        fixture = random_fixture(4)

        # Execute
        path = await repository.save_fixture(fixture)
        loaded = load_fixture(path)

        # Assertions
        assert isinstance(loaded, OracleFixture)
        assert loaded.name == fixture.name
        assert np.array_equal(loaded.env.q_table, fixture.env.q_table)
        assert np.array_equal(loaded.target, fixture.target)

    @pytest.mark.asyncio
    async def test_discrete_env_round_trip(self, repository):
        """Test a discrete environment written as JSON reloads with the same tables"""
        # Mock
        env = random_fixture(1).env

        # Execute
        await repository.save_discrete_env(env, "env.json")
        loaded = await repository.load_discrete_env("env.json")

        # Assertions
        assert np.array_equal(loaded.joint, env.joint)
        assert np.array_equal(loaded.features, env.features)
