import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from nof1 import (
    BestTreatment,
    Dataset,
    Direction,
    Observation,
    PopulationParams,
    PriorSpec,
    RandomEffects,
    ResponseFamily,
    Scenario,
    conditional_log_likelihood,
    population_log_prior,
    random_effects_log_prior,
    simulate_response,
    true_best_treatment,
)
from nof1.errors import ContractError, DataError


def params_natural(beta0=0.0, beta1=0.0, sigma2=1.0, omega0=1.0, omega1=1.0):
    return PopulationParams.from_natural(beta0, beta1, sigma2, omega0, omega1)


class TestConditionalLogLikelihood:
    def test_standard_normal_at_mean(self):
        theta = params_natural()
        b = RandomEffects.zero([1])
        obs = [Observation(1, 1, 1, 0, 0.0)]
        val = conditional_log_likelihood(obs, theta, b, ResponseFamily.NORMAL)
        assert val == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)

    def test_two_identical_observations_double(self):
        theta = params_natural(beta0=2.0, sigma2=4.0)
        b = RandomEffects([1], np.array([[0.3, -0.2]]))
        one = [Observation(1, 1, 1, 1, 1.7)]
        two = one + [Observation(1, 1, 2, 1, 1.7)]
        v1 = conditional_log_likelihood(one, theta, b, ResponseFamily.NORMAL)
        v2 = conditional_log_likelihood(two, theta, b, ResponseFamily.NORMAL)
        assert v2 == pytest.approx(2 * v1, rel=1e-15)

    def test_scenario1_truth_against_density_oracle(self):
        theta = params_natural(beta0=25.0, beta1=-1.0, sigma2=9.0,
                               omega0=2.25, omega1=2.25)
        b = RandomEffects.zero([1])
        obs = [Observation(1, 1, 1, 1, 24.0)]
        val = conditional_log_likelihood(obs, theta, b, ResponseFamily.NORMAL)
        oracle = stats.norm.logpdf(24.0, loc=25.0 - 1.0, scale=3.0)
        assert val == pytest.approx(oracle, abs=1e-12)

    def test_lognormal_jacobian_against_oracle(self):
        theta = params_natural(beta0=3.0, beta1=0.2, sigma2=0.25)
        b = RandomEffects([1], np.array([[0.1, -0.05]]))
        y = 22.5
        obs = [Observation(1, 1, 1, 1, y)]
        val = conditional_log_likelihood(obs, theta, b, ResponseFamily.LOGNORMAL)
        # lognormal density with log-scale mean eta and sd sigma
        eta = 3.0 + 0.1 + (0.2 - 0.05) * 1
        oracle = stats.lognorm.logpdf(y, s=0.5, scale=math.exp(eta))
        assert val == pytest.approx(oracle, abs=1e-12)

    def test_nonpositive_lognormal_response_rejected(self):
        theta = params_natural()
        b = RandomEffects.zero([1])
        obs = [Observation(1, 1, 1, 0, -1.0)]
        with pytest.raises(DataError):
            conditional_log_likelihood(obs, theta, b, ResponseFamily.LOGNORMAL)

    def test_unknown_patient_rejected(self):
        theta = params_natural()
        b = RandomEffects.zero([1])
        obs = [Observation(2, 1, 1, 0, 0.0)]
        with pytest.raises(ContractError):
            conditional_log_likelihood(obs, theta, b, ResponseFamily.NORMAL)

    def test_additive_over_disjoint_sets(self):
        rng = np.random.default_rng(3)
        theta = params_natural(beta0=1.0, beta1=-0.5, sigma2=2.0)
        b = RandomEffects([1, 2], rng.normal(size=(2, 2)))
        obs = [
            Observation(int(p), k, j, int(d), float(y))
            for (p, k, j, d), y in zip(
                [(1, 1, 1, 0), (1, 1, 2, 1), (2, 1, 1, 1), (2, 1, 2, 0)],
                rng.normal(1.0, 2.0, size=4),
            )
        ]
        total = conditional_log_likelihood(obs, theta, b, ResponseFamily.NORMAL)
        parts = (
            conditional_log_likelihood(obs[:2], theta, b, ResponseFamily.NORMAL)
            + conditional_log_likelihood(obs[2:], theta, b, ResponseFamily.NORMAL)
        )
        assert total == pytest.approx(parts, rel=1e-14)

    @settings(max_examples=30, deadline=None)
    @given(
        beta0=st.floats(-30, 30), beta1=st.floats(-5, 5),
        log_sigma=st.floats(-1, 2), y=st.floats(-50, 50),
        d=st.integers(0, 1), b0=st.floats(-3, 3), b1=st.floats(-3, 3),
    )
    def test_matches_scipy_oracle(self, beta0, beta1, log_sigma, y, d, b0, b1):
        theta = PopulationParams(beta0, beta1, log_sigma, 0.0, 0.0)
        b = RandomEffects([1], np.array([[b0, b1]]))
        obs = [Observation(1, 1, 1, d, y)]
        val = conditional_log_likelihood(obs, theta, b, ResponseFamily.NORMAL)
        mean = beta0 + b0 + (beta1 + b1) * d
        oracle = stats.norm.logpdf(y, loc=mean, scale=math.exp(log_sigma))
        assert val == pytest.approx(oracle, abs=1e-10)


class TestRandomEffectsLogPrior:
    def test_zero_effects_unit_variances(self):
        theta = params_natural()
        b = RandomEffects.zero([1])
        assert random_effects_log_prior(b, theta) == pytest.approx(
            -math.log(2 * math.pi), abs=1e-12
        )

    def test_scaling_omega_lowers_by_log4_per_patient(self):
        b = RandomEffects.zero([1, 2, 3])
        base = random_effects_log_prior(b, params_natural(omega0=1.0, omega1=1.0))
        scaled = random_effects_log_prior(b, params_natural(omega0=4.0, omega1=4.0))
        assert base - scaled == pytest.approx(3 * math.log(4.0), rel=1e-12)

    def test_five_patients_against_oracle(self):
        rng = np.random.default_rng(11)
        b = RandomEffects(tuple(range(1, 6)), rng.normal(size=(5, 2)))
        theta = params_natural(omega0=2.25, omega1=2.25)
        val = random_effects_log_prior(b, theta)
        oracle = (
            stats.norm.logpdf(b.values[:, 0], scale=math.sqrt(2.25)).sum()
            + stats.norm.logpdf(b.values[:, 1], scale=math.sqrt(2.25)).sum()
        )
        assert val == pytest.approx(oracle, abs=1e-12)


class TestPopulationLogPrior:
    def test_at_prior_mean(self, prior):
        theta = PopulationParams.from_array(prior.means)
        expected = sum(
            -0.5 * math.log(2 * math.pi * sd**2) for sd in prior.sds
        )
        assert population_log_prior(theta, prior) == pytest.approx(expected, rel=1e-14)

    def test_one_sd_shift_drops_half(self, prior):
        at_mean = population_log_prior(PopulationParams.from_array(prior.means), prior)
        shifted_vec = prior.means.copy()
        shifted_vec[1] += prior.sds[1]
        shifted = population_log_prior(PopulationParams.from_array(shifted_vec), prior)
        assert at_mean - shifted == pytest.approx(0.5, abs=1e-12)

    def test_arbitrary_theta_against_oracle(self, prior):
        rng = np.random.default_rng(5)
        vec = rng.normal(size=5) * [50, 50, 1, 1, 1]
        val = population_log_prior(PopulationParams.from_array(vec), prior)
        oracle = stats.norm.logpdf(vec, loc=prior.means, scale=prior.sds).sum()
        assert val == pytest.approx(oracle, abs=1e-12)


class TestSimulateResponse:
    def test_degenerate_noise_returns_conditional_mean(self):
        sc = Scenario(beta0=25, beta1=-1, sigma2=1e-12, omega0=1, omega1=1,
                      n_patients=1, n_cycles=1)
        rng = np.random.default_rng(0)
        draw = simulate_response(sc, np.array([0.4, -0.1]), 1, rng)
        assert draw == pytest.approx(25 + 0.4 - 1 - 0.1, abs=1e-4)

    def test_lognormal_degenerate_noise(self):
        sc = Scenario(beta0=3.2, beta1=0.1, sigma2=1e-12, omega0=1, omega1=1,
                      n_patients=1, n_cycles=1, family=ResponseFamily.LOGNORMAL)
        rng = np.random.default_rng(0)
        draw = simulate_response(sc, np.zeros(2), 0, rng)
        assert draw == pytest.approx(math.exp(3.2), abs=1e-4)

    def test_monte_carlo_mean(self, scenario1):
        rng = np.random.default_rng(123)
        n = 10**5
        draws = [simulate_response(scenario1, np.zeros(2), 0, rng) for _ in range(n)]
        tol = 3 * math.sqrt(scenario1.sigma2 / n)
        assert np.mean(draws) == pytest.approx(25.0, abs=tol)

    def test_fixed_seed_reproduces_sequence(self, scenario1):
        seqs = []
        for _ in range(2):
            rng = np.random.default_rng(777)
            seqs.append([simulate_response(scenario1, np.zeros(2), d % 2, rng)
                         for d in range(10)])
        assert seqs[0] == seqs[1]


class TestTrueBestTreatment:
    def test_lower_better_negative_effect(self):
        sc = Scenario(beta0=25, beta1=-1, sigma2=9, omega0=1, omega1=1,
                      n_patients=1, n_cycles=1)
        assert true_best_treatment(sc, np.array([0.0, -1.0])) == BestTreatment(1)

    def test_lower_better_positive_effect(self):
        sc = Scenario(beta0=25, beta1=-1, sigma2=9, omega0=1, omega1=1,
                      n_patients=1, n_cycles=1)
        assert true_best_treatment(sc, np.array([0.0, 1.5])) == BestTreatment(0)

    def test_higher_better_lognormal(self):
        sc = Scenario(beta0=3.0, beta1=0.1, sigma2=0.04, omega0=0.01, omega1=0.01,
                      n_patients=1, n_cycles=1, family=ResponseFamily.LOGNORMAL,
                      direction=Direction.HIGHER)
        assert true_best_treatment(sc, np.array([0.0, 0.2])) == BestTreatment(1)

    def test_exact_tie_flagged(self):
        sc = Scenario(beta0=25, beta1=-1, sigma2=9, omega0=1, omega1=1,
                      n_patients=1, n_cycles=1)
        result = true_best_treatment(sc, np.array([0.0, 1.0]))
        assert result.tie


class TestParameterScales:
    @settings(max_examples=50, deadline=None)
    @given(
        beta0=st.floats(-100, 100), beta1=st.floats(-20, 20),
        sigma2=st.floats(1e-6, 1e6), omega0=st.floats(1e-6, 1e6),
        omega1=st.floats(1e-6, 1e6),
    )
    def test_natural_unconstrained_roundtrip(self, beta0, beta1, sigma2, omega0, omega1):
        params = PopulationParams.from_natural(beta0, beta1, sigma2, omega0, omega1)
        back = params.to_natural()
        assert back[0] == beta0 and back[1] == beta1
        assert back[2] == pytest.approx(sigma2, rel=1e-12)
        assert back[3] == pytest.approx(omega0, rel=1e-12)
        assert back[4] == pytest.approx(omega1, rel=1e-12)

    def test_nonpositive_variances_rejected(self):
        with pytest.raises(DataError):
            PopulationParams.from_natural(0, 0, -1.0, 1.0, 1.0)

    def test_prior_sds_positive(self):
        with pytest.raises(DataError):
            PriorSpec(np.zeros(5), np.array([1.0, 1.0, 0.0, 1.0, 1.0]))


class TestDataset:
    def test_unknown_patient_rejected(self):
        with pytest.raises(ContractError):
            Dataset.from_observations(
                [Observation(9, 1, 1, 0, 1.0)], (1, 2), ResponseFamily.NORMAL
            )

    def test_with_observation_matches_rebuild_bitwise(self):
        rng = np.random.default_rng(8)
        obs = [Observation(1, 1, 1, 0, float(rng.normal())),
               Observation(2, 1, 1, 1, float(rng.normal()))]
        base = Dataset.from_observations(obs, (1, 2), ResponseFamily.NORMAL)
        extra = Observation(2, 1, 2, 0, 1.25)
        inc = base.with_observation(extra)
        rebuilt = Dataset.from_observations(obs + [extra], (1, 2), ResponseFamily.NORMAL)
        for field in ("n0", "n1", "mean0", "mean1", "sse0", "sse1"):
            assert np.array_equal(getattr(inc, field), getattr(rebuilt, field))
        assert inc.n_total == rebuilt.n_total

    def test_cell_statistics_values(self):
        obs = [Observation(1, 1, 1, 0, 2.0), Observation(1, 1, 2, 0, 4.0),
               Observation(1, 2, 1, 1, 10.0)]
        data = Dataset.from_observations(obs, (1,), ResponseFamily.NORMAL)
        assert data.n0[0] == 2 and data.n1[0] == 1
        assert data.mean0[0] == 3.0 and data.mean1[0] == 10.0
        assert data.sse0[0] == 2.0 and data.sse1[0] == 0.0
