import numpy as np
import pytest

from nof1 import (
    Dataset,
    Observation,
    PolicyConfig,
    PolicyKind,
    PriorSpec,
    ResponseFamily,
    Scenario,
    simulate_response,
)

SCENARIO_1 = Scenario(
    beta0=25.0, beta1=-1.0, sigma2=9.0, omega0=2.25, omega1=2.25,
    n_patients=20, n_cycles=3,
)


@pytest.fixture
def prior():
    return PriorSpec.default()


@pytest.fixture
def scenario1():
    return SCENARIO_1


def simulate_crossover_dataset(scenario: Scenario, seed: int,
                               family: ResponseFamily | None = None) -> tuple[Dataset, object]:
    """Simulate a balanced randomized crossover trial; returns (dataset, truths)."""
    rng = np.random.default_rng(seed)
    truths = scenario.draw_random_effects(rng)
    family = family or scenario.family
    obs = []
    for k in range(1, scenario.n_cycles + 1):
        for p in scenario.patients:
            for j, d in enumerate(rng.permutation([0, 1])):
                y = simulate_response(scenario, truths.for_patient(p), int(d), rng)
                obs.append(Observation(p, k, j + 1, int(d), y))
    return Dataset.from_observations(obs, scenario.patients, family), truths


@pytest.fixture
def small_scenario():
    return Scenario(
        beta0=25.0, beta1=-1.0, sigma2=9.0, omega0=2.25, omega1=2.25,
        n_patients=5, n_cycles=3,
    )


@pytest.fixture
def five_patient_dataset(small_scenario):
    data, _ = simulate_crossover_dataset(small_scenario, seed=20260810)
    return data


@pytest.fixture
def mab_policy():
    return PolicyConfig(PolicyKind.MAB)


@pytest.fixture
def randomized_policy():
    return PolicyConfig(PolicyKind.RANDOMIZED)
