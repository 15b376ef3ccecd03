import numpy as np
import pytest

from nof1.config import load_study, parse_policies, parse_prior, parse_scenario, parse_study
from nof1.errors import ConfigError
from nof1.model import Direction, ResponseFamily

VALID = """
study:
  n_replicates: 3
  master_seed: 99
scenario:
  family: normal
  direction: lower
  n_patients: 4
  n_cycles: 2
  beta0: 25.0
  beta1: -1.0
  sigma2: 9.0
  omega0: 2.25
  omega1: 2.25
policies:
  - kind: optimal
    q_utility: 150
  - kind: mab
  - kind: randomized
"""


def test_parse_valid_study(tmp_path):
    path = tmp_path / "study.yaml"
    path.write_text(VALID)
    config, digest = load_study(path)
    assert config.n_replicates == 3
    assert config.master_seed == 99
    assert config.scenario.family is ResponseFamily.NORMAL
    assert config.scenario.direction is Direction.LOWER
    assert [p.kind.value for p in config.policies] == ["optimal", "mab", "randomized"]
    assert config.policies[0].q_utility == 150
    assert len(digest) == 64
    _, digest2 = load_study(path)
    assert digest == digest2


def test_default_prior_when_absent(tmp_path):
    path = tmp_path / "study.yaml"
    path.write_text(VALID)
    config, _ = load_study(path)
    assert np.array_equal(config.prior.means, [0.0, 0.0, 2.5, 2.5, 2.5])
    assert np.array_equal(config.prior.sds, [100.0, 100.0, 1.6, 1.6, 1.6])


def test_prior_override(tmp_path):
    doc = VALID + """
prior:
  beta0: {mean: 10.0, sd: 5.0}
"""
    path = tmp_path / "study.yaml"
    path.write_text(doc)
    config, _ = load_study(path)
    assert config.prior.means[0] == 10.0
    assert config.prior.sds[0] == 5.0
    assert config.prior.sds[1] == 100.0


def test_nonpositive_sigma2_names_field():
    doc = {
        "study": {"n_replicates": 1, "master_seed": 1},
        "scenario": {"family": "normal", "n_patients": 1, "n_cycles": 1,
                     "beta0": 0, "beta1": 0, "sigma2": -9.0,
                     "omega0": 1.0, "omega1": 1.0},
        "policies": [{"kind": "mab"}],
    }
    with pytest.raises(ConfigError) as err:
        parse_study(doc)
    assert err.value.field == "scenario.sigma2"


def test_bad_family_named():
    with pytest.raises(ConfigError) as err:
        parse_scenario({"family": "poisson", "n_patients": 1, "n_cycles": 1,
                        "beta0": 0, "beta1": 0, "sigma2": 1, "omega0": 1, "omega1": 1})
    assert err.value.field == "scenario.family"


def test_low_q_named():
    with pytest.raises(ConfigError) as err:
        parse_policies([{"kind": "optimal", "q_utility": 10}])
    assert "policies[0]" in err.value.field


def test_unknown_prior_coordinate_named():
    with pytest.raises(ConfigError) as err:
        parse_prior({"beta9": {"mean": 0, "sd": 1}})
    assert err.value.field == "prior.beta9"


def test_missing_master_seed_named():
    with pytest.raises(ConfigError) as err:
        parse_study({"study": {"n_replicates": 2},
                     "scenario": {}, "policies": [{"kind": "mab"}]})
    assert err.value.field == "study.master_seed"


def test_invalid_yaml_line_reported(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("study: [unclosed\n")
    with pytest.raises(ConfigError) as err:
        load_study(path)
    assert "line" in str(err.value)


def test_duplicate_policy_kind_rejected():
    doc = {
        "study": {"n_replicates": 1, "master_seed": 1},
        "scenario": {"family": "normal", "n_patients": 1, "n_cycles": 1,
                     "beta0": 0, "beta1": 0, "sigma2": 1.0,
                     "omega0": 1.0, "omega1": 1.0},
        "policies": [{"kind": "mab"}, {"kind": "mab"}],
    }
    with pytest.raises(ConfigError):
        parse_study(doc)
