import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specsteer.core import DistributionError, kl_divergence, softmax, total_variation
from specsteer.fusion import (
    fused_target,
    one_step_protocol_law,
    pmi_reward,
    recovery_distribution,
    verification_alpha,
)

P_LLM = np.array([0.5, 0.3, 0.2])
P_PLUS = np.array([0.2, 0.7, 0.1])
P_MINUS = np.array([0.4, 0.4, 0.2])


def random_dist(rng, size):
    return rng.dirichlet(np.ones(size))


class TestPmiReward:
    def test_identical_is_zero(self):
        assert np.max(np.abs(pmi_reward(P_MINUS, P_MINUS))) < 1e-12

    def test_hand_values(self):
        np.testing.assert_allclose(
            pmi_reward(P_PLUS, P_MINUS),
            [np.log(0.5), np.log(1.75), np.log(0.5)],
            atol=1e-12,
        )

    def test_sign_law(self):
        r = pmi_reward(P_PLUS, P_MINUS)
        assert (np.sign(r) == np.sign(P_PLUS - P_MINUS)).all()

    def test_size_mismatch(self):
        with pytest.raises(DistributionError):
            pmi_reward(P_PLUS, np.array([0.5, 0.5]))


class TestFusedTarget:
    def test_reward_collapse(self):
        out = fused_target(P_LLM, P_MINUS, P_MINUS)
        np.testing.assert_allclose(out.target, P_LLM, atol=1e-12)
        assert out.partition == pytest.approx(1.0, abs=1e-12)

    def test_hand_example(self):
        # Unnormalized weights [0.25, 0.525, 0.1], Z = 0.875.
        out = fused_target(P_LLM, P_PLUS, P_MINUS)
        assert out.partition == pytest.approx(0.875, abs=1e-9)
        np.testing.assert_allclose(
            out.target, [0.2857142857, 0.6, 0.1142857143], atol=1e-9
        )

    def test_uniform_prior_proportional_to_ratio(self):
        uniform = np.full(3, 1 / 3)
        out = fused_target(uniform, P_PLUS, P_MINUS)
        ratio = P_PLUS / P_MINUS
        np.testing.assert_allclose(out.target, ratio / ratio.sum(), atol=1e-12)

    def test_matches_reward_formula(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            v = int(rng.integers(2, 20))
            p_llm, p_plus, p_minus = (random_dist(rng, v) for _ in range(3))
            out = fused_target(p_llm, p_plus, p_minus)
            expected = p_llm * np.exp(out.reward) / out.partition
            np.testing.assert_allclose(out.target, expected, atol=1e-9)

    def test_partition_is_normalizer(self):
        rng = np.random.default_rng(5)
        p_llm, p_plus, p_minus = (random_dist(rng, 8) for _ in range(3))
        out = fused_target(p_llm, p_plus, p_minus)
        z = float(np.sum(p_llm * p_plus / p_minus))
        assert out.partition == pytest.approx(z, rel=1e-9)


class TestVerificationAlpha:
    def test_hand_values(self):
        assert verification_alpha(np.array([0.3]), np.array([0.4]), 0.5)[0] == 1.0
        assert verification_alpha(np.array([0.1]), np.array([0.4]), 1.0)[0] == pytest.approx(0.25)

    def test_lambda_must_be_positive(self):
        with pytest.raises(DistributionError):
            verification_alpha(P_LLM, P_MINUS, 0.0)

    def test_tiny_lambda_accepts_all(self):
        assert (verification_alpha(P_LLM, P_MINUS, 1e-12) == 1.0).all()


class TestRecovery:
    def test_beta_one_equals_fused_target(self):
        # Exactness of the steered softmax against the fused distribution.
        rng = np.random.default_rng(3)
        for _ in range(200):
            v = int(rng.integers(3, 30))
            h_llm, h_plus, h_minus = (rng.normal(0, 3, v) for _ in range(3))
            rec = recovery_distribution(h_llm, h_plus, h_minus, beta=1.0)
            target = fused_target(softmax(h_llm), softmax(h_plus), softmax(h_minus)).target
            assert kl_divergence(rec, target) < 1e-10

    def test_beta_zero_is_prior(self):
        rng = np.random.default_rng(4)
        h_llm, h_plus, h_minus = (rng.normal(0, 2, 6) for _ in range(3))
        np.testing.assert_allclose(
            recovery_distribution(h_llm, h_plus, h_minus, 0.0), softmax(h_llm), atol=1e-12
        )


class TestOneStepLaw:
    def test_tiny_lambda_returns_drafter(self):
        h = np.log(np.stack([P_LLM, P_PLUS, P_MINUS]))
        out = one_step_protocol_law(P_LLM, P_PLUS, P_MINUS, h[0], h[1], h[2], 1e-12, 1.0)
        np.testing.assert_allclose(out, P_PLUS, atol=1e-9)

    def test_all_reject_beta_one_is_fused_target(self):
        h = np.log(np.stack([P_LLM, P_PLUS, P_MINUS]))
        out = one_step_protocol_law(P_LLM, P_PLUS, P_MINUS, h[0], h[1], h[2], 1e12, 1.0)
        target = fused_target(P_LLM, P_PLUS, P_MINUS).target
        assert total_variation(out, target) < 1e-9

    def test_hand_example_all_accepted(self):
        # alpha = [0.5/0.2, 0.3/0.2, 0.2/0.1] all >= 1 at lambda = 0.5.
        h = np.log(np.stack([P_LLM, P_PLUS, P_MINUS]))
        out = one_step_protocol_law(P_LLM, P_PLUS, P_MINUS, h[0], h[1], h[2], 0.5, 1.0)
        np.testing.assert_allclose(out, P_PLUS, atol=1e-12)

    def test_cancellation(self):
        # alpha never reads the drafter distribution.
        a1 = verification_alpha(P_LLM, P_MINUS, 0.8)
        a2 = verification_alpha(P_LLM, P_MINUS, 0.8)
        np.testing.assert_array_equal(a1, a2)
        law_mass = one_step_protocol_law(
            P_LLM, P_PLUS, P_MINUS,
            np.log(P_LLM), np.log(P_PLUS), np.log(P_MINUS), 0.8, 1.0,
        )
        assert abs(law_mass.sum() - 1.0) < 1e-9

    @settings(max_examples=60, deadline=None)
    @given(
        st.integers(2, 12),
        st.floats(1e-3, 10.0),
        st.floats(0.0, 4.0),
        st.integers(0, 2**32 - 1),
    )
    def test_output_is_valid_distribution(self, v, lam, beta, seed):
        rng = np.random.default_rng(seed)
        p_llm, p_plus, p_minus = (random_dist(rng, v) for _ in range(3))
        out = one_step_protocol_law(
            p_llm, p_plus, p_minus,
            np.log(np.maximum(p_llm, 1e-12)),
            np.log(np.maximum(p_plus, 1e-12)),
            np.log(np.maximum(p_minus, 1e-12)),
            lam, beta,
        )
        assert out.min() >= 0
        assert abs(out.sum() - 1.0) < 1e-9
