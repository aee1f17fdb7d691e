import numpy as np
import pytest

from shared.seeding import make_rng
from src.exceptions.custom_exceptions import InvalidInputException
from src.models.logit import fit_multinomial_logit, floor_simplex


class TestFloorSimplex:
    """Test suite for probability flooring"""

    def test_rows_stay_on_simplex(self):
        """Test floored rows are normalized and bounded below"""
        # Mock
        probs = np.array([[1.0, 0.0, 0.0], [0.2, 0.3, 0.5]])

        # Execute
        floored = floor_simplex(probs, 0.05)

        # Assertions
        assert np.allclose(floored.sum(axis=1), 1.0)
        assert np.all(floored >= 0.05 - 1e-15)
        assert floored[0, 0] == pytest.approx(0.05 + 0.85)

    def test_negative_entries_are_clipped(self):
        """Test regression outputs below zero are clipped before renormalizing"""
        # Execute
        floored = floor_simplex(np.array([[-0.2, 0.6, 0.6]]), 0.0)

        # Assertions
        assert np.allclose(floored, [[0.0, 0.5, 0.5]])

    def test_all_zero_row_becomes_uniform(self):
        """Test a row with no mass falls back to uniform"""
        # Execute
        floored = floor_simplex(np.zeros((1, 4)), 0.01)

        # Assertions
        assert np.allclose(floored, 0.25)

    def test_floor_too_large(self):
        """Test p_min with |A| p_min >= 1"""
        # Execute and assert exception
        with pytest.raises(InvalidInputException) as exc_info:
            floor_simplex(np.ones((1, 4)) / 4, 0.25)

        assert "too large" in str(exc_info.value)


class TestMultinomialLogit:
    """Test suite for the regularized multinomial logit"""

    @pytest.fixture
    def logged(self):
        """Actions drawn from a known softmax over one feature"""
        rng = make_rng(11)
        features = rng.standard_normal((2000, 1))
        logits = np.column_stack([np.zeros(2000), 1.5 * features[:, 0], -1.0 * features[:, 0]])
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        actions = np.array([rng.choice(3, p=row) for row in probs])
        return features, actions, probs

    def test_fit_tracks_true_probabilities(self, logged):
        """Test fitted probabilities are close to the generating ones"""
        # Mock
        features, actions, probs = logged

        # Execute
        model = fit_multinomial_logit(features, actions, 3, reg=1e-3, p_min=0.0)

        # Assertions
        assert model.num_actions == 3
        assert np.mean(np.abs(model.predict_proba(features) - probs)) < 0.05

    def test_predictions_respect_floor(self, logged):
        """Test predict_proba never goes below p_min"""
        # Mock
        features, actions, _ = logged

        # Execute
        model = fit_multinomial_logit(features, actions, 3, reg=1e-3, p_min=0.02)
        predicted = model.predict_proba(np.array([[10.0], [-10.0]]))

        # Assertions
        assert np.all(predicted >= 0.02 - 1e-15)
        assert np.allclose(predicted.sum(axis=1), 1.0)

    def test_unseen_action_gets_little_mass(self, logged):
        """Test an action never logged still gets a finite, small probability"""
        # Mock
        features, actions, _ = logged
        actions = np.where(actions == 2, 0, actions)

        # Execute
        model = fit_multinomial_logit(features, actions, 3, reg=1e-2, p_min=0.0)

        # Assertions
        assert np.all(np.isfinite(model.theta))
        assert np.mean(model.predict_proba(features)[:, 2]) < 0.05

    def test_rejects_mismatched_rows(self, logged):
        """Test features and actions with different lengths"""
        # Mock
        features, actions, _ = logged

        # Execute and assert exception
        with pytest.raises(InvalidInputException) as exc_info:
            fit_multinomial_logit(features, actions[:-1], 3, reg=1e-3, p_min=0.0)

        assert "matching rows" in str(exc_info.value)
