"""Study configuration files.

A study config is a YAML document with a scenario block (generative truth),
an optional prior block (defaults to the vague priors), a policy list, a
replicate count, and a master seed:

    study:
      n_replicates: 10
      master_seed: 20260810
    scenario:
      family: normal          # normal | lognormal
      direction: lower        # lower | higher response is better
      n_patients: 10
      n_cycles: 3
      beta0: 25.0
      beta1: -1.0
      sigma2: 9.0
      omega0: 2.25
      omega1: 2.25
    policies:
      - kind: optimal
        q_utility: 200
      - kind: mab
        q_mab: 1000
      - kind: randomized

Validation errors carry the dotted path of the offending field.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import yaml

from .engine import StudyConfig
from .errors import ConfigError
from .model import PARAM_NAMES, Direction, PriorSpec, ResponseFamily, Scenario
from .policies import PolicyConfig, PolicyKind


def _require(block: dict, field: str, path: str, types) -> object:
    if field not in block:
        raise ConfigError(f"{path}.{field}", "missing required field")
    value = block[field]
    if not isinstance(value, types) or isinstance(value, bool):
        names = types.__name__ if isinstance(types, type) else "/".join(t.__name__ for t in types)
        raise ConfigError(f"{path}.{field}", f"expected {names}, got {type(value).__name__}")
    return value


def _positive(block: dict, field: str, path: str) -> float:
    value = float(_require(block, field, path, (int, float)))
    if value <= 0:
        raise ConfigError(f"{path}.{field}", "must be > 0")
    return value


def parse_scenario(block: dict, path: str = "scenario") -> Scenario:
    if not isinstance(block, dict):
        raise ConfigError(path, "expected a mapping")
    try:
        family = ResponseFamily(str(block.get("family", "normal")))
    except ValueError:
        raise ConfigError(f"{path}.family",
                          f"must be one of {[f.value for f in ResponseFamily]}") from None
    try:
        direction = Direction(str(block.get("direction", "lower")))
    except ValueError:
        raise ConfigError(f"{path}.direction",
                          f"must be one of {[d.value for d in Direction]}") from None
    n_patients = int(_require(block, "n_patients", path, int))
    if n_patients < 1:
        raise ConfigError(f"{path}.n_patients", "must be >= 1")
    n_cycles = int(_require(block, "n_cycles", path, int))
    if n_cycles < 0:
        raise ConfigError(f"{path}.n_cycles", "must be >= 0")
    return Scenario(
        beta0=float(_require(block, "beta0", path, (int, float))),
        beta1=float(_require(block, "beta1", path, (int, float))),
        sigma2=_positive(block, "sigma2", path),
        omega0=_positive(block, "omega0", path),
        omega1=_positive(block, "omega1", path),
        n_patients=n_patients,
        n_cycles=n_cycles,
        family=family,
        direction=direction,
        slots_per_cycle=int(block.get("slots_per_cycle", 2)),
        seed=int(block.get("seed", 0)),
    )


def parse_prior(block: dict | None, path: str = "prior") -> PriorSpec:
    if block is None:
        return PriorSpec.default()
    if not isinstance(block, dict):
        raise ConfigError(path, "expected a mapping")
    default = PriorSpec.default()
    means = default.means.copy()
    sds = default.sds.copy()
    for key in block:
        if key not in PARAM_NAMES:
            raise ConfigError(f"{path}.{key}", f"unknown prior coordinate; use one of {PARAM_NAMES}")
    for i, name in enumerate(PARAM_NAMES):
        if name not in block:
            continue
        entry = block[name]
        if not isinstance(entry, dict):
            raise ConfigError(f"{path}.{name}", "expected a mapping with mean and sd")
        means[i] = float(_require(entry, "mean", f"{path}.{name}", (int, float)))
        sds[i] = float(_positive(entry, "sd", f"{path}.{name}"))
    return PriorSpec(np.array(means), np.array(sds))


def parse_policies(block, path: str = "policies") -> tuple[PolicyConfig, ...]:
    if not isinstance(block, list) or not block:
        raise ConfigError(path, "expected a non-empty list of policies")
    policies = []
    for idx, entry in enumerate(block):
        sub = f"{path}[{idx}]"
        if not isinstance(entry, dict):
            raise ConfigError(sub, "expected a mapping")
        try:
            kind = PolicyKind(str(_require(entry, "kind", sub, str)))
        except ValueError:
            raise ConfigError(f"{sub}.kind",
                              f"must be one of {[k.value for k in PolicyKind]}") from None
        kwargs = {}
        if "q_utility" in entry:
            kwargs["q_utility"] = int(_require(entry, "q_utility", sub, int))
        if "q_mab" in entry:
            kwargs["q_mab"] = int(_require(entry, "q_mab", sub, int))
        try:
            policies.append(PolicyConfig(kind=kind, **kwargs))
        except ValueError as exc:
            raise ConfigError(sub, str(exc)) from None
    return tuple(policies)


def parse_study(doc: dict) -> StudyConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config document must be a mapping")
    study_block = doc.get("study")
    if not isinstance(study_block, dict):
        raise ConfigError("study", "missing study block")
    n_replicates = int(_require(study_block, "n_replicates", "study", int))
    if n_replicates < 1:
        raise ConfigError("study.n_replicates", "must be >= 1")
    master_seed = int(_require(study_block, "master_seed", "study", int))
    scenario = parse_scenario(doc.get("scenario", {}))
    prior = parse_prior(doc.get("prior"))
    policies = parse_policies(doc.get("policies"))
    try:
        return StudyConfig(
            scenario=scenario, prior=prior, policies=policies,
            n_replicates=n_replicates, master_seed=master_seed,
        )
    except ValueError as exc:
        raise ConfigError("study", str(exc)) from None


def load_study(path) -> tuple[StudyConfig, str]:
    """Parse a study config file; returns (config, sha256 of the raw bytes)."""
    raw = Path(path).read_bytes()
    try:
        doc = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"not valid YAML: {exc}") from None
    return parse_study(doc), hashlib.sha256(raw).hexdigest()
