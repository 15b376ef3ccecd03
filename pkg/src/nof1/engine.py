"""Adaptive trial loop, replicated simulation studies, and evaluation metrics.

A trial walks a fixed cursor (cycle, then patient, then slot within the
cycle), selects each allocation with the configured policy, and refits the
joint posterior after every accepted observation.  Everything is a pure
function of the trial seeds: per-step random streams are derived from
(seed, namespace, step) spawn keys, so a serialized state resumes with the
identical remaining trace and live sessions replay deterministically.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ContractError, DataError, Nof1Error
from .laplace import PosteriorApprox, cholesky_pd, fit_posterior
from .model import (
    Dataset,
    Direction,
    Observation,
    PriorSpec,
    RandomEffects,
    ResponseFamily,
    Scenario,
    simulate_response,
    true_best_treatment,
)
from .policies import (
    DecisionContext,
    PolicyConfig,
    PolicyKind,
    mab_select,
    randomized_sequence,
    select_optimal,
)

METRIC_Q = 1000

# spawn-key namespaces under each stream seed
_NS_INIT = 0
_NS_STEP = 1


def derived_rng(seed: int, *key: int) -> np.random.Generator:
    """Deterministic child stream; pure in (seed, key), safe across restarts."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


@dataclass(frozen=True)
class TrialConfig:
    n_patients: int
    n_cycles: int
    family: ResponseFamily
    direction: Direction
    prior: PriorSpec
    policy: PolicyConfig
    slots_per_cycle: int = 2
    scenario: Scenario | None = None  # present => simulation mode
    truth_seed: int = 0
    data_seed: int = 0
    policy_seed: int = 0

    def __post_init__(self):
        if self.n_patients < 1:
            raise DataError("a trial needs at least one patient")
        if self.n_cycles < 0:
            raise DataError("n_cycles must be nonnegative")
        if self.slots_per_cycle != 2:
            raise DataError("trials administer both arms per cycle (two slots)")

    @classmethod
    def for_scenario(cls, scenario: Scenario, prior: PriorSpec, policy: PolicyConfig,
                     truth_seed: int = 0, data_seed: int = 0, policy_seed: int = 0
                     ) -> "TrialConfig":
        return cls(
            n_patients=scenario.n_patients,
            n_cycles=scenario.n_cycles,
            family=scenario.family,
            direction=scenario.direction,
            prior=prior,
            policy=policy,
            slots_per_cycle=scenario.slots_per_cycle,
            scenario=scenario,
            truth_seed=truth_seed,
            data_seed=data_seed,
            policy_seed=policy_seed,
        )

    @property
    def patients(self) -> tuple:
        return tuple(range(1, self.n_patients + 1))

    @property
    def total_steps(self) -> int:
        return self.n_patients * self.n_cycles * self.slots_per_cycle

    def cursor(self, step: int) -> tuple[int, int, int]:
        """(cycle, patient, slot) reached after ``step`` accepted observations."""
        if step >= self.total_steps:
            raise ContractError("trial is complete; no cursor")
        per_cycle = self.n_patients * self.slots_per_cycle
        cycle = step // per_cycle + 1
        rem = step % per_cycle
        patient = self.patients[rem // self.slots_per_cycle]
        slot = rem % self.slots_per_cycle + 1
        return cycle, patient, slot

    def to_record(self) -> dict:
        rec = {
            "n_patients": self.n_patients,
            "n_cycles": self.n_cycles,
            "family": self.family.value,
            "direction": self.direction.value,
            "slots_per_cycle": self.slots_per_cycle,
            "prior": self.prior.to_record(),
            "policy": self.policy.to_record(),
            "truth_seed": self.truth_seed,
            "data_seed": self.data_seed,
            "policy_seed": self.policy_seed,
            "scenario": None,
        }
        if self.scenario is not None:
            sc = self.scenario
            rec["scenario"] = {
                "beta0": sc.beta0, "beta1": sc.beta1, "sigma2": sc.sigma2,
                "omega0": sc.omega0, "omega1": sc.omega1,
                "n_patients": sc.n_patients, "n_cycles": sc.n_cycles,
                "family": sc.family.value, "direction": sc.direction.value,
                "slots_per_cycle": sc.slots_per_cycle, "seed": sc.seed,
            }
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "TrialConfig":
        scenario = None
        if rec.get("scenario") is not None:
            s = dict(rec["scenario"])
            s["family"] = ResponseFamily(s["family"])
            s["direction"] = Direction(s["direction"])
            scenario = Scenario(**s)
        return cls(
            n_patients=int(rec["n_patients"]),
            n_cycles=int(rec["n_cycles"]),
            family=ResponseFamily(rec["family"]),
            direction=Direction(rec["direction"]),
            prior=PriorSpec.from_record(rec["prior"]),
            policy=PolicyConfig.from_record(rec["policy"]),
            slots_per_cycle=int(rec["slots_per_cycle"]),
            scenario=scenario,
            truth_seed=int(rec["truth_seed"]),
            data_seed=int(rec["data_seed"]),
            policy_seed=int(rec["policy_seed"]),
        )


@dataclass(frozen=True)
class Proposal:
    step: int
    cycle: int
    patient: int
    slot: int
    treatment: int
    diagnostics: dict


@dataclass
class CycleSnapshot:
    cycle: int
    log_det_full: float
    log_det_pop: float
    posterior_record: dict

    def to_record(self) -> dict:
        return {
            "cycle": self.cycle,
            "log_det_full": self.log_det_full,
            "log_det_pop": self.log_det_pop,
            "posterior": self.posterior_record,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "CycleSnapshot":
        return cls(rec["cycle"], rec["log_det_full"], rec["log_det_pop"], rec["posterior"])


class TrialState:
    """Mutable trial state: observation log, current posterior, cursor."""

    def __init__(self, config: TrialConfig, truths: RandomEffects | None = None):
        self.config = config
        if config.scenario is not None and truths is None:
            truths = config.scenario.draw_random_effects(
                derived_rng(config.truth_seed, _NS_INIT)
            )
        self.truths = truths
        self.dataset = Dataset.from_observations([], config.patients, config.family)
        self.posterior = fit_posterior(self.dataset, config.prior).posterior
        self.step_index = 0
        self.snapshots: list[CycleSnapshot] = []
        self.sequences: dict[int, list[int]] = {}
        if config.policy.kind is PolicyKind.RANDOMIZED:
            rng = derived_rng(config.policy_seed, _NS_INIT)
            self.sequences = {
                p: randomized_sequence(config.n_cycles, config.slots_per_cycle, rng)
                for p in config.patients
            }
        self._snapshot(0)

    # -- bookkeeping ---------------------------------------------------------

    @property
    def observations(self) -> tuple:
        return self.dataset.observations

    @property
    def complete(self) -> bool:
        return self.step_index >= self.config.total_steps

    def cursor(self) -> tuple[int, int, int]:
        return self.config.cursor(self.step_index)

    def _snapshot(self, cycle: int) -> None:
        self.snapshots.append(CycleSnapshot(
            cycle=cycle,
            log_det_full=metric_log_det(self.posterior),
            log_det_pop=metric_log_det(self.posterior, block="population"),
            posterior_record=self.posterior.to_record(),
        ))

    # -- serialization -------------------------------------------------------

    def to_record(self) -> dict:
        return {
            "config": self.config.to_record(),
            "observations": [o.to_record() for o in self.observations],
            "step": self.step_index,
            "posterior": self.posterior.to_record(),
            "snapshots": [s.to_record() for s in self.snapshots],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TrialState":
        config = TrialConfig.from_record(rec["config"])
        state = cls.__new__(cls)
        state.config = config
        state.truths = None
        if config.scenario is not None:
            state.truths = config.scenario.draw_random_effects(
                derived_rng(config.truth_seed, _NS_INIT)
            )
        obs = [Observation.from_record(r) for r in rec["observations"]]
        state.dataset = Dataset.from_observations(obs, config.patients, config.family)
        state.posterior = PosteriorApprox.from_record(rec["posterior"])
        state.step_index = int(rec["step"])
        state.snapshots = [CycleSnapshot.from_record(r) for r in rec["snapshots"]]
        state.sequences = {}
        if config.policy.kind is PolicyKind.RANDOMIZED:
            rng = derived_rng(config.policy_seed, _NS_INIT)
            state.sequences = {
                p: randomized_sequence(config.n_cycles, config.slots_per_cycle, rng)
                for p in config.patients
            }
        return state


def propose(state: TrialState) -> Proposal:
    """Run the policy at the cursor.  Pure: repeat calls return the same proposal."""
    if state.complete:
        raise ContractError("trial is complete")
    config = state.config
    cycle, patient, slot = state.cursor()
    rng = derived_rng(config.policy_seed, _NS_STEP, state.step_index)
    kind = config.policy.kind
    if kind is PolicyKind.RANDOMIZED:
        pos = (cycle - 1) * config.slots_per_cycle + (slot - 1)
        treatment = state.sequences[patient][pos]
        diagnostics = {"pre_randomized": True}
    elif kind is PolicyKind.MAB:
        treatment, diagnostics = mab_select(
            state.posterior, patient, config.family, config.direction,
            config.policy.q_mab, rng,
        )
    else:
        ctx = DecisionContext(
            data=state.dataset, prior=config.prior, posterior=state.posterior,
            family=config.family, direction=config.direction,
            patient=patient, cycle=cycle, slot=slot,
        )
        treatment, diagnostics = select_optimal(ctx, config.policy.q_utility, rng)
    return Proposal(state.step_index, cycle, patient, slot, treatment, diagnostics)


def accept(state: TrialState, treatment: int, response: float) -> Observation:
    """Append one observation and refit; state is untouched if the refit fails."""
    if state.complete:
        raise ContractError("trial is complete")
    cycle, patient, slot = state.cursor()
    obs = Observation(patient, cycle, slot, treatment, float(response))
    new_dataset = state.dataset.with_observation(obs)
    fit = fit_posterior(new_dataset, state.config.prior,
                        warm_start=state.posterior.theta_star())
    # commit only after a successful refit
    state.dataset = new_dataset
    state.posterior = fit.posterior
    state.step_index += 1
    per_cycle = state.config.n_patients * state.config.slots_per_cycle
    if state.step_index % per_cycle == 0:
        state._snapshot(state.step_index // per_cycle)
    return obs


@dataclass(frozen=True)
class StepRecord:
    proposal: Proposal
    observation: Observation


def step(state: TrialState) -> StepRecord:
    """One iteration of the adaptive loop in simulation mode."""
    if state.config.scenario is None:
        raise ContractError("step() simulates responses; live trials use propose/accept")
    proposal = propose(state)
    data_rng = derived_rng(state.config.data_seed, _NS_STEP, state.step_index)
    y = simulate_response(
        state.config.scenario,
        state.truths.for_patient(proposal.patient),
        proposal.treatment,
        data_rng,
    )
    observation = accept(state, proposal.treatment, y)
    return StepRecord(proposal, observation)


def run_trial(config: TrialConfig, truths: RandomEffects | None = None) -> TrialState:
    """Execute all n_patients * slots_per_cycle * n_cycles steps.

    Empty trials return the prior-only posterior."""
    state = TrialState(config, truths=truths)
    while not state.complete:
        step(state)
    return state


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def metric_log_det(posterior: PosteriorApprox, block: str = "full") -> float:
    """Log determinant of the posterior covariance via triangular factorization."""
    if block == "full":
        return posterior.log_det()
    if block == "population":
        L, _ = cholesky_pd(posterior.pop_cov, "population covariance")
        return 2.0 * float(np.sum(np.log(np.diag(L))))
    raise ContractError(f"unknown block {block!r}")


def metric_best_prob(posterior: PosteriorApprox, patient: int, d_best: int,
                     family: ResponseFamily, direction: Direction,
                     q: int, rng: np.random.Generator) -> float:
    """Posterior probability that the truly best arm is the better one."""
    from .policies import mab_reward_probability

    probs = mab_reward_probability(posterior, patient, family, direction, q, rng)
    return probs[d_best]


def metric_best_received(observations, d_best: dict[int, int],
                         slots_per_cycle: int = 2) -> list[dict]:
    """Per patient and cycle, the fraction of slots that allocated the best arm."""
    counts: dict[tuple[int, int], list[int]] = {}
    for obs in observations:
        if obs.patient not in d_best:
            continue
        key = (obs.patient, obs.cycle)
        got = counts.setdefault(key, [0, 0])
        got[0] += int(obs.treatment == d_best[obs.patient])
        got[1] += 1
    rows = []
    for (patient, cycle), (hits, total) in sorted(counts.items()):
        rows.append({
            "patient": patient,
            "cycle": cycle,
            "prop_best": hits / total,
            "n_slots": total,
        })
    return rows


# ---------------------------------------------------------------------------
# replicated studies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StudyConfig:
    scenario: Scenario
    prior: PriorSpec
    policies: tuple
    n_replicates: int
    master_seed: int

    def __post_init__(self):
        object.__setattr__(self, "policies", tuple(self.policies))
        if self.n_replicates < 1:
            raise DataError("n_replicates must be >= 1")
        kinds = [p.kind for p in self.policies]
        if len(set(kinds)) != len(kinds):
            raise DataError("each policy kind may appear at most once in a study")


def _seed_table(study: StudyConfig) -> list[dict]:
    """Per-replicate stream seeds, drawn in a fixed documented order."""
    rng = np.random.default_rng(study.master_seed)
    table = []
    for r in range(study.n_replicates):
        entry = {"replicate": r, "truth_seed": int(rng.integers(2**62))}
        for policy in study.policies:
            entry[policy.kind.value] = {
                "data_seed": int(rng.integers(2**62)),
                "policy_seed": int(rng.integers(2**62)),
                "metric_seed": int(rng.integers(2**62)),
            }
        table.append(entry)
    return table


@dataclass
class StudyResult:
    study: StudyConfig
    seed_table: list[dict]
    logdet_rows: list[dict] = field(default_factory=list)
    best_prob_rows: list[dict] = field(default_factory=list)
    best_received_rows: list[dict] = field(default_factory=list)
    traces: dict = field(default_factory=dict)  # (replicate, policy) -> [obs records]
    failures: list[dict] = field(default_factory=list)
    tie_patients: list[dict] = field(default_factory=list)

    def manifest(self) -> dict:
        import scipy

        sc = self.study.scenario
        return {
            "engine_version": __version__,
            "numpy_version": np.__version__,
            "scipy_version": scipy.__version__,
            "master_seed": self.study.master_seed,
            "n_replicates": self.study.n_replicates,
            "scenario": {
                "beta0": sc.beta0, "beta1": sc.beta1, "sigma2": sc.sigma2,
                "omega0": sc.omega0, "omega1": sc.omega1,
                "n_patients": sc.n_patients, "n_cycles": sc.n_cycles,
                "family": sc.family.value, "direction": sc.direction.value,
            },
            "prior": self.study.prior.to_record(),
            "policies": [p.to_record() for p in self.study.policies],
            "seed_table": self.seed_table,
            "failures": self.failures,
            "tie_patients": self.tie_patients,
        }

    def write_tables(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "logdet.csv",
                   ["replicate", "policy", "cycle", "log_det_full", "log_det_pop"],
                   self.logdet_rows)
        _write_csv(out / "best_prob.csv",
                   ["replicate", "policy", "cycle", "patient", "d_best", "prob_best"],
                   self.best_prob_rows)
        _write_csv(out / "best_received.csv",
                   ["replicate", "policy", "cycle", "patient", "d_best", "prop_best"],
                   self.best_received_rows)
        traces_dir = out / "traces"
        traces_dir.mkdir(exist_ok=True)
        for (replicate, policy), records in sorted(self.traces.items()):
            path = traces_dir / f"r{replicate:03d}_{policy}.jsonl"
            with open(path, "w") as fh:
                for rec in records:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
        with open(out / "manifest.json", "w") as fh:
            json.dump(self.manifest(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _write_csv(path: Path, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _replicate_args(study: StudyConfig, seed_table: list[dict]) -> list[dict]:
    sc = study.scenario
    scenario_rec = {
        "beta0": sc.beta0, "beta1": sc.beta1, "sigma2": sc.sigma2,
        "omega0": sc.omega0, "omega1": sc.omega1,
        "n_patients": sc.n_patients, "n_cycles": sc.n_cycles,
        "family": sc.family.value, "direction": sc.direction.value,
        "slots_per_cycle": sc.slots_per_cycle, "seed": sc.seed,
    }
    return [
        {
            "replicate": r,
            "scenario": scenario_rec,
            "prior": study.prior.to_record(),
            "policies": [p.to_record() for p in study.policies],
            "seeds": seed_table[r],
        }
        for r in range(study.n_replicates)
    ]


def _run_replicate(args: dict) -> dict:
    """One paired replicate: same patient truths across every policy."""
    replicate = args["replicate"]
    s = dict(args["scenario"])
    s["family"] = ResponseFamily(s["family"])
    s["direction"] = Direction(s["direction"])
    scenario = Scenario(**s)
    prior = PriorSpec.from_record(args["prior"])
    policies = [PolicyConfig.from_record(p) for p in args["policies"]]
    seeds = args["seeds"]

    truths = scenario.draw_random_effects(derived_rng(seeds["truth_seed"], _NS_INIT))
    d_best: dict[int, int] = {}
    ties = []
    for p in scenario.patients:
        best = true_best_treatment(scenario, truths.for_patient(p))
        if best.tie:
            ties.append({"replicate": replicate, "patient": p})
        else:
            d_best[p] = best.treatment

    out = {
        "replicate": replicate,
        "logdet_rows": [], "best_prob_rows": [], "best_received_rows": [],
        "traces": {}, "failures": [], "tie_patients": ties,
    }
    for policy in policies:
        pol_seeds = seeds[policy.kind.value]
        config = TrialConfig.for_scenario(
            scenario, prior, policy,
            truth_seed=seeds["truth_seed"],
            data_seed=pol_seeds["data_seed"],
            policy_seed=pol_seeds["policy_seed"],
        )
        try:
            state = run_trial(config, truths=truths)
        except Nof1Error as exc:
            out["failures"].append({
                "replicate": replicate, "policy": policy.kind.value, "error": str(exc),
            })
            continue
        name = policy.kind.value
        for snap in state.snapshots:
            out["logdet_rows"].append({
                "replicate": replicate, "policy": name, "cycle": snap.cycle,
                "log_det_full": snap.log_det_full, "log_det_pop": snap.log_det_pop,
            })
            if snap.cycle == 0:
                continue
            posterior = PosteriorApprox.from_record(snap.posterior_record)
            for p, best in d_best.items():
                rng = derived_rng(pol_seeds["metric_seed"], snap.cycle, p)
                prob = metric_best_prob(
                    posterior, p, best, scenario.family, scenario.direction,
                    METRIC_Q, rng,
                )
                out["best_prob_rows"].append({
                    "replicate": replicate, "policy": name, "cycle": snap.cycle,
                    "patient": p, "d_best": best, "prob_best": prob,
                })
        for row in metric_best_received(state.observations, d_best,
                                        scenario.slots_per_cycle):
            out["best_received_rows"].append({
                "replicate": replicate, "policy": name, "cycle": row["cycle"],
                "patient": row["patient"], "d_best": d_best[row["patient"]],
                "prop_best": row["prop_best"],
            })
        out["traces"][(replicate, name)] = [o.to_record() for o in state.observations]
    return out


def run_study(study: StudyConfig, workers: int = 1) -> StudyResult:
    """Paired replicate study: per replicate, one trial per policy on shared truths."""
    seed_table = _seed_table(study)
    args = _replicate_args(study, seed_table)
    result = StudyResult(study=study, seed_table=seed_table)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_replicate, args))
    else:
        outputs = [_run_replicate(a) for a in args]
    for out in outputs:
        result.logdet_rows.extend(out["logdet_rows"])
        result.best_prob_rows.extend(out["best_prob_rows"])
        result.best_received_rows.extend(out["best_received_rows"])
        result.traces.update(out["traces"])
        result.failures.extend(out["failures"])
        result.tie_patients.extend(out["tie_patients"])
    return result
