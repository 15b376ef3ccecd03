"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The scaled comparison study (ten replicates of a 10-patient, 3-cycle trial
under all three policies) is shared by the ordering criteria and dominates
the runtime of this module.
"""

import functools
import math
import warnings

import numpy as np
import pytest
from scipy import stats

from nof1 import (
    Dataset,
    Observation,
    PolicyConfig,
    PolicyKind,
    PopulationParams,
    PriorSpec,
    ResponseFamily,
    Scenario,
    StudyConfig,
    TrialConfig,
    conditional_laplace_posterior,
    fit_posterior,
    kld_mvn,
    laplace_marginal_loglik,
    mab_reward_probability,
    randomized_sequence,
    reference_posterior_is,
    run_study,
    run_trial,
    step,
)
from nof1.engine import TrialState
from nof1.laplace import central_diff_gradient, inner_gradient
from nof1.model import working_response

from conftest import simulate_crossover_dataset


def criterion(name):
    def decorator(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"\nACCEPTANCE {name}: FAIL")
                raise
            print(f"\nACCEPTANCE {name}: PASS")
        return wrapper
    return decorator


# ---------------------------------------------------------------------------
# criterion 1: Gaussian exactness of the marginal log-likelihood
# ---------------------------------------------------------------------------

def analytic_marginal(theta: PopulationParams, obs, patients, family) -> float:
    D = np.diag([theta.omega0, theta.omega1])
    beta = np.array([theta.beta0, theta.beta1])
    total = 0.0
    for p in patients:
        rows = [o for o in obs if o.patient == p]
        if not rows:
            continue
        X = np.array([[1.0, o.treatment] for o in rows])
        t = np.array([working_response(family, o.response) for o in rows])
        V = X @ D @ X.T + theta.sigma2 * np.eye(len(rows))
        total += stats.multivariate_normal(mean=X @ beta, cov=V).logpdf(t)
        if family is ResponseFamily.LOGNORMAL:
            total -= np.sum(t)
    return float(total)


@criterion("gaussian-exactness")
def test_gaussian_exactness_100_point_grid():
    rng = np.random.default_rng(20260810)
    worst = 0.0
    for trial in range(100):
        family = ResponseFamily.NORMAL if trial % 2 == 0 else ResponseFamily.LOGNORMAL
        n_patients = int(rng.integers(1, 5))
        patients = tuple(range(1, n_patients + 1))
        obs = []
        for p in patients:
            for j in range(rng.integers(0, 5)):
                d = int(rng.integers(0, 2))
                if family is ResponseFamily.LOGNORMAL:
                    y = float(np.exp(rng.normal(1.0, 0.8)))
                else:
                    y = float(rng.normal(5.0, 3.0))
                obs.append(Observation(p, 1 + j // 2, j % 2 + 1, d, y))
        data = Dataset.from_observations(obs, patients, family)
        theta = PopulationParams.from_array(rng.normal([2.0, -0.5, 0.4, 0.2, 0.1], 0.8))
        delta = abs(laplace_marginal_loglik(theta, data)
                    - analytic_marginal(theta, obs, patients, family))
        worst = max(worst, delta)
        assert delta < 1e-6
    print(f"  worst |lhat - analytic| over 100 grid points: {worst:.2e}")


# ---------------------------------------------------------------------------
# criterion 2: closed-form KL divergence against Monte Carlo
# ---------------------------------------------------------------------------

@criterion("kld-correctness")
def test_kld_closed_form_against_monte_carlo():
    fixture = kld_mvn([0.0], [[1.0]], [1.0], [[0.5]])
    assert abs(fixture - 0.596574) < 1e-6

    rng = np.random.default_rng(77)
    n = 10**6
    for pair in range(50):
        dim = int(rng.integers(1, 7))

        def rand_cov():
            A = rng.normal(size=(dim, dim))
            return A @ A.T + 0.5 * dim * np.eye(dim)

        m0, c0 = rng.normal(size=dim), rand_cov()
        m1, c1 = rng.normal(size=dim), rand_cov()
        closed = kld_mvn(m0, c0, m1, c1)

        L1 = np.linalg.cholesky(c1)
        z = rng.standard_normal((n, dim))
        x = m1 + z @ L1.T

        def logpdf(x, mean, cov):
            L = np.linalg.cholesky(cov)
            diff = np.linalg.solve(L, (x - mean).T).T
            return (-0.5 * dim * math.log(2 * math.pi)
                    - np.sum(np.log(np.diag(L)))
                    - 0.5 * np.sum(diff * diff, axis=1))

        vals = logpdf(x, m1, c1) - logpdf(x, m0, c0)
        est = float(np.mean(vals))
        se = float(np.std(vals) / math.sqrt(n))
        assert abs(closed - est) <= 3 * se + 1e-9, (pair, closed, est, se)


# ---------------------------------------------------------------------------
# criterion 3: appendix pattern — two-stage Laplace vs conditional variant
# ---------------------------------------------------------------------------

@criterion("appendix-replication")
def test_appendix_pattern_50_datasets(prior):
    scenario = Scenario(beta0=25.0, beta1=-1.0, sigma2=9.0, omega0=2.25,
                        omega1=2.25, n_patients=5, n_cycles=3)
    n_data = 50
    mean_hits = 0
    cond_worse = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for ds in range(n_data):
            data, _ = simulate_crossover_dataset(scenario, seed=3000 + ds)
            main = fit_posterior(data, prior).posterior
            cond = conditional_laplace_posterior(data, prior)
            oracle = reference_posterior_is(
                data, prior, main, 10000, np.random.default_rng(5000 + ds))
            sd = oracle.sd()
            beta_ok = all(
                abs(main.pop_mean[i] - oracle.mean[i]) <= 0.2 * sd[i]
                for i in (0, 1)
            )
            mean_hits += int(beta_ok)
            dev_main = sum(abs(main.pop_mean[i] - oracle.mean[i]) for i in (3, 4))
            dev_cond = sum(abs(cond.pop_mean[i] - oracle.mean[i]) for i in (3, 4))
            cond_worse += int(dev_cond > dev_main)
    print(f"  beta means within 0.2 oracle sd: {mean_hits}/{n_data}; "
          f"conditional variant worse on log-sqrt-omega: {cond_worse}/{n_data}")
    assert mean_hits >= 0.9 * n_data
    assert cond_worse >= 0.75 * n_data


# ---------------------------------------------------------------------------
# criteria 4 + 5: scaled Scenario-1 comparison study
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def scaled_study_result():
    scenario = Scenario(beta0=25.0, beta1=-1.0, sigma2=9.0, omega0=2.25,
                        omega1=2.25, n_patients=10, n_cycles=3)
    study = StudyConfig(
        scenario=scenario,
        prior=PriorSpec.default(),
        policies=(
            PolicyConfig(PolicyKind.OPTIMAL, q_utility=400),
            PolicyConfig(PolicyKind.MAB, q_mab=1000),
            PolicyConfig(PolicyKind.RANDOMIZED),
        ),
        n_replicates=10,
        master_seed=20260810,
    )
    result = run_study(study, workers=2)
    assert not result.failures, result.failures
    return result


@criterion("scenario1-logdet-ordering")
def test_scaled_study_logdet_ordering(scaled_study_result):
    rows = [r for r in scaled_study_result.logdet_rows if r["cycle"] == 3]
    med = {
        policy: float(np.median([r["log_det_full"] for r in rows if r["policy"] == policy]))
        for policy in ("optimal", "mab", "randomized")
    }
    print(f"  median cycle-3 log det: optimal={med['optimal']:.3f}, "
          f"mab={med['mab']:.3f}, randomized={med['randomized']:.3f}")
    assert med["optimal"] < med["randomized"]
    assert med["optimal"] <= med["mab"]


@criterion("best-treatment-allocation")
def test_scaled_study_best_received(scaled_study_result):
    rows = [r for r in scaled_study_result.best_received_rows if r["cycle"] == 3]
    mean_prop = {
        policy: float(np.mean([r["prop_best"] for r in rows if r["policy"] == policy]))
        for policy in ("mab", "randomized")
    }
    rand_all = [r["prop_best"] for r in scaled_study_result.best_received_rows
                if r["policy"] == "randomized"]
    print(f"  mean cycle-3 proportion best: mab={mean_prop['mab']:.3f}, "
          f"randomized={mean_prop['randomized']:.3f}")
    assert all(v == 0.5 for v in rand_all)  # balanced by construction
    assert mean_prop["mab"] > mean_prop["randomized"]


# ---------------------------------------------------------------------------
# criterion 6: loop contract and bit reproducibility
# ---------------------------------------------------------------------------

@criterion("loop-contract")
def test_loop_contract_and_bit_reproducibility(tmp_path, prior):
    scenario = Scenario(beta0=25.0, beta1=-1.0, sigma2=9.0, omega0=2.25,
                        omega1=2.25, n_patients=20, n_cycles=3)
    config = TrialConfig.for_scenario(
        scenario, prior, PolicyConfig(PolicyKind.RANDOMIZED),
        truth_seed=11, data_seed=12, policy_seed=13,
    )
    state = run_trial(config)
    assert len(state.observations) == 120

    small = Scenario(beta0=25.0, beta1=-1.0, sigma2=9.0, omega0=2.25,
                     omega1=2.25, n_patients=2, n_cycles=1)
    study = StudyConfig(
        scenario=small, prior=prior,
        policies=(
            PolicyConfig(PolicyKind.OPTIMAL, q_utility=100),
            PolicyConfig(PolicyKind.MAB),
            PolicyConfig(PolicyKind.RANDOMIZED),
        ),
        n_replicates=2, master_seed=424242,
    )
    dirs = []
    for run in range(2):
        result = run_study(study)
        out = tmp_path / f"run{run}"
        result.write_tables(out)
        dirs.append(out)
    files = sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (dirs[0] / rel).read_bytes() == (dirs[1] / rel).read_bytes(), rel
    print(f"  120 observations; {len(files)} study files byte-identical across reruns")


# ---------------------------------------------------------------------------
# criterion 7: invariant suite
# ---------------------------------------------------------------------------

@criterion("invariant-suite")
def test_invariant_suite(prior):
    rng = np.random.default_rng(99)

    # covariance symmetry and positive definiteness on every fit
    n_fits = 0
    for seed in range(8):
        scenario = Scenario(
            beta0=25.0, beta1=-1.0, sigma2=9.0, omega0=2.25, omega1=2.25,
            n_patients=int(rng.integers(1, 6)), n_cycles=int(rng.integers(1, 4)),
        )
        data, _ = simulate_crossover_dataset(scenario, seed=7000 + seed)
        post = fit_posterior(data, prior).posterior
        assert np.array_equal(post.cov, post.cov.T)
        np.linalg.cholesky(post.cov)
        assert np.all(post.cross_block() == 0.0)
        n_fits += 1

        # reward probabilities sum to one on every posterior
        for patient in post.patients:
            p0, p1 = mab_reward_probability(
                post, patient, scenario.family, scenario.direction, 200,
                np.random.default_rng(seed))
            assert p0 + p1 == 1.0

    # per-cycle balance on every generated randomized sequence
    seq_rng = np.random.default_rng(1)
    for _ in range(10**4):
        seq = randomized_sequence(3, 2, seq_rng)
        for k in range(3):
            assert sorted(seq[2 * k: 2 * k + 2]) == [0, 1]

    # analytic inner gradient matches central differences (relative 1e-6)
    scenario = Scenario(beta0=25.0, beta1=-1.0, sigma2=9.0, omega0=2.25,
                        omega1=2.25, n_patients=4, n_cycles=2)
    data, _ = simulate_crossover_dataset(scenario, seed=123)
    from nof1 import RandomEffects, joint_log_density
    for trial in range(10):
        theta = PopulationParams.from_array(rng.normal([25, -1, 1, 0.4, 0.4], 0.5))
        b_flat = rng.normal(size=8)

        def h_of_b(vec):
            b = RandomEffects(data.patients, vec.reshape(4, 2))
            return joint_log_density(theta, b, data.observations, data.family)

        analytic = inner_gradient(
            theta, RandomEffects(data.patients, b_flat.reshape(4, 2)), data)
        numeric = central_diff_gradient(h_of_b, b_flat, rel_step=1e-6).reshape(4, 2)
        scale = np.maximum(np.abs(numeric), 1.0)
        assert np.max(np.abs(analytic - numeric) / scale) < 1e-6

    # serialized trial state resumes with the identical remaining trace
    import json
    config = TrialConfig.for_scenario(
        scenario, prior, PolicyConfig(PolicyKind.MAB),
        truth_seed=21, data_seed=22, policy_seed=23,
    )
    s1 = TrialState(config)
    for _ in range(5):
        step(s1)
    s2 = TrialState.from_record(json.loads(json.dumps(s1.to_record())))
    while not s1.complete:
        step(s1)
    while not s2.complete:
        step(s2)
    assert [o.to_record() for o in s1.observations] == \
        [o.to_record() for o in s2.observations]
    assert np.array_equal(s1.posterior.mean, s2.posterior.mean)
    assert np.array_equal(s1.posterior.cov, s2.posterior.cov)
    print(f"  {n_fits} fits symmetric PD; probabilities sum to 1; "
          "10k sequences balanced; gradients verified; resume equivalent")
