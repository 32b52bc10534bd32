"""Gate distribution: hand-evaluated samples, Monte Carlo oracle, gradient checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distillprune import tensor as T
from distillprune.hard_concrete import HardConcreteGateSet
from distillprune.tensor import Tensor, check_gradients


def gates_with(log_alpha, dtype=np.float64, **kwargs):
    log_alpha = np.asarray(log_alpha, dtype=dtype)
    gs = HardConcreteGateSet(group_count=log_alpha.size, dtype=dtype, **kwargs)
    gs.log_alpha.data[:] = log_alpha
    return gs


def mc_prob_nonzero(log_alpha, beta, lo, hi, n_samples, seed):
    """Empirical P(z > 0): an independent numpy oracle for the closed form."""
    rng = np.random.default_rng(seed)
    u = rng.uniform(size=n_samples)
    v = 1.0 / (1.0 + np.exp(-((np.log(u / (1.0 - u)) + log_alpha) / beta)))
    z = np.clip((hi - lo) * v + lo, 0.0, 1.0)
    return float((z > 0).mean())


class TestSampleMask:
    def test_hand_evaluated_midpoint(self):
        gs = gates_with([0.0])
        sample = gs.mask_from_uniform(np.array([0.5]))
        assert sample.v.item() == pytest.approx(0.5)
        assert sample.v_bar.item() == pytest.approx(0.5)
        assert sample.z.item() == pytest.approx(0.5)

    def test_strongly_negative_log_alpha_closes_gate(self):
        gs = gates_with([-20.0])
        for u in (0.01, 0.5, 0.99):
            assert gs.mask_from_uniform(np.array([u])).z.item() == 0.0

    def test_strongly_positive_log_alpha_opens_gate(self):
        gs = gates_with([20.0])
        for u in (0.01, 0.5, 0.99):
            assert gs.mask_from_uniform(np.array([u])).z.item() == 1.0

    @given(
        log_alpha=st.floats(-30, 30),
        u=st.floats(0.0, 1.0),
        beta=st.floats(0.1, 2.0),
    )
    @settings(max_examples=200, deadline=None)
    def test_mask_always_in_unit_interval(self, log_alpha, u, beta):
        gs = gates_with([log_alpha], beta=beta)
        z = gs.mask_from_uniform(np.array([u])).z.item()
        assert 0.0 <= z <= 1.0

    def test_sample_uses_caller_rng_deterministically(self):
        gs = gates_with([0.3, -0.2, 1.0])
        z1 = gs.sample_mask(np.random.default_rng(5)).z.data
        z2 = gs.sample_mask(np.random.default_rng(5)).z.data
        np.testing.assert_array_equal(z1, z2)

    def test_gradient_through_sample_with_frozen_noise(self):
        # interior z: |logit(u) + log_alpha| stays well below the clamp threshold
        gs = gates_with([0.4, -0.3, 0.1, -0.6])
        u = np.array([0.5, 0.45, 0.55, 0.5])
        w = Tensor(np.array([1.3, -0.7, 0.4, 2.0]))

        def f(la):
            gs.log_alpha = la
            return T.sum(gs.mask_from_uniform(u).z * w)

        report = check_gradients(f, gs.log_alpha, eps=1e-6)
        assert report.max_rel_err < 1e-6


class TestProbNonzero:
    def test_default_constants_closed_form(self):
        gs = gates_with([0.0])
        # Monte Carlo oracle, 1e6 draws: empirical frequency of z > 0
        est = mc_prob_nonzero(0.0, gs.beta, gs.stretch_lo, gs.stretch_hi, 10**6, seed=0)
        p = gs.prob_nonzero().item()
        assert p == pytest.approx(0.8318, abs=1e-4)
        assert p == pytest.approx(est, abs=3 * np.sqrt(est * (1 - est) / 10**6))

    def test_saturating_limits(self):
        assert gates_with([-40.0]).prob_nonzero().item() == pytest.approx(0.0, abs=1e-12)
        assert gates_with([40.0]).prob_nonzero().item() == pytest.approx(1.0, abs=1e-12)

    def test_matches_monte_carlo_at_random_log_alpha(self):
        rng = np.random.default_rng(11)
        for i, la in enumerate(rng.uniform(-3, 3, size=10)):
            gs = gates_with([la])
            n = 10**5
            est = mc_prob_nonzero(la, gs.beta, gs.stretch_lo, gs.stretch_hi, n, seed=100 + i)
            se = np.sqrt(max(est * (1 - est), 1e-12) / n)
            assert np.abs(gs.prob_nonzero().item() - est) <= 3 * se

    @given(st.floats(-5, 5), st.floats(-5, 5))
    @settings(max_examples=100, deadline=None)
    def test_monotone_in_log_alpha(self, a, b):
        lo_la, hi_la = min(a, b), max(a, b)
        assert gates_with([lo_la]).prob_nonzero().item() <= gates_with([hi_la]).prob_nonzero().item()


class TestExpectedL0:
    def test_twelve_groups_at_zero(self):
        gs = gates_with(np.zeros(12))
        assert gs.expected_l0().item() == pytest.approx(12 * 0.83181, abs=0.01)

    def test_empty_set(self):
        gs = HardConcreteGateSet(group_count=0)
        assert gs.expected_l0().item() == 0.0

    def test_saturated_single_group(self):
        assert gates_with([20.0]).expected_l0().item() == pytest.approx(1.0, abs=1e-6)

    def test_gradient_matches_finite_differences(self):
        gs = gates_with([-1.2, 0.0, 0.7, 2.5])

        def f(la):
            gs.log_alpha = la
            return gs.expected_l0()

        report = check_gradients(f, gs.log_alpha, eps=1e-6)
        assert report.max_rel_err < 1e-6


class TestDeterministicMask:
    def test_fully_open_at_init(self):
        gs = gates_with([4.0])
        # sigmoid(4) = 0.9820 stretches to 1.0784, clamped to 1
        assert gs.deterministic_mask()[0] == 1.0

    def test_midpoint(self):
        assert gates_with([0.0]).deterministic_mask()[0] == pytest.approx(0.5)

    def test_prunes_below_stretch_boundary(self):
        # sigmoid(log_alpha) <= -lo/(hi-lo) = 1/12 closes the gate
        boundary = float(np.log(1.0 / 11.0))
        assert gates_with([boundary - 0.1]).deterministic_mask()[0] == 0.0
        assert gates_with([boundary + 0.1]).deterministic_mask()[0] > 0.0

    @given(st.floats(-10, 10), st.floats(-10, 10))
    @settings(max_examples=100, deadline=None)
    def test_monotone_and_bounded(self, a, b):
        lo_la, hi_la = min(a, b), max(a, b)
        m_lo = gates_with([lo_la]).deterministic_mask()[0]
        m_hi = gates_with([hi_la]).deterministic_mask()[0]
        assert 0.0 <= m_lo <= m_hi <= 1.0


class TestValidation:
    def test_rejects_bad_constants(self):
        with pytest.raises(ValueError):
            HardConcreteGateSet(4, beta=0.0)
        with pytest.raises(ValueError):
            HardConcreteGateSet(4, stretch_lo=0.1)
        with pytest.raises(ValueError):
            HardConcreteGateSet(4, stretch_hi=0.9)
        with pytest.raises(ValueError):
            HardConcreteGateSet(-1)
