"""Hierarchical model for aggregated N-of-1 trials.

The response of patient i at slot j of cycle k follows

    E[y_ijk | b_i, d_ijk] = (beta0 + b0_i) + (beta1 + b1_i) * d_ijk

with treatment indicator d in {0, 1} (treatment=1, placebo=0), patient-level
random effects b_i = (b0_i, b1_i) ~ N(0, diag(omega0, omega1)), and Gaussian
residual noise with variance sigma2.  Two response families are supported:
the identity-link Normal family, and a log-normal family that applies the
same linear model to log(y).

Population parameters are stored on an unconstrained scale
(beta0, beta1, log sigma, log sqrt(omega0), log sqrt(omega1)) so that the
positivity of the variance components is structural and the default priors
are plain Normals on every coordinate.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError

LOG_TWO_PI = math.log(2.0 * math.pi)

# Unconstrained-scale coordinates, in storage order.
PARAM_NAMES = ("beta0", "beta1", "log_sigma", "log_sqrt_omega0", "log_sqrt_omega1")
N_PARAMS = 5

# |log-scale| bound keeping exp() finite during optimizer line searches.
# Priors put all mass far inside, so the clamp never binds at a solution.
LOG_SCALE_BOUND = 40.0


class ResponseFamily(str, enum.Enum):
    """Conditional response family given the random effects."""

    NORMAL = "normal"
    LOGNORMAL = "lognormal"


class Direction(str, enum.Enum):
    """Whether a lower or a higher mean response is clinically better."""

    LOWER = "lower"
    HIGHER = "higher"


def _clamped_exp2(x: float) -> float:
    """exp(2x) with x clamped to keep the result finite and nonzero."""
    return math.exp(2.0 * min(max(x, -LOG_SCALE_BOUND), LOG_SCALE_BOUND))


@dataclass(frozen=True)
class PopulationParams:
    """Population parameter vector on the unconstrained scale."""

    beta0: float
    beta1: float
    log_sigma: float
    log_sqrt_omega0: float
    log_sqrt_omega1: float

    @property
    def sigma2(self) -> float:
        return _clamped_exp2(self.log_sigma)

    @property
    def omega0(self) -> float:
        return _clamped_exp2(self.log_sqrt_omega0)

    @property
    def omega1(self) -> float:
        return _clamped_exp2(self.log_sqrt_omega1)

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.beta0, self.beta1, self.log_sigma,
             self.log_sqrt_omega0, self.log_sqrt_omega1],
            dtype=float,
        )

    @classmethod
    def from_array(cls, vec) -> "PopulationParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (N_PARAMS,):
            raise ContractError(f"parameter vector must have shape (5,), got {vec.shape}")
        return cls(*(float(v) for v in vec))

    @classmethod
    def from_natural(cls, beta0, beta1, sigma2, omega0, omega1) -> "PopulationParams":
        """Build from natural-scale variances (sigma2, omega0, omega1 > 0)."""
        for name, val in (("sigma2", sigma2), ("omega0", omega0), ("omega1", omega1)):
            if val <= 0:
                raise DataError(f"{name} must be strictly positive, got {val}")
        return cls(
            beta0=float(beta0),
            beta1=float(beta1),
            log_sigma=0.5 * math.log(sigma2),
            log_sqrt_omega0=0.5 * math.log(omega0),
            log_sqrt_omega1=0.5 * math.log(omega1),
        )

    def to_natural(self) -> tuple[float, float, float, float, float]:
        return (self.beta0, self.beta1, self.sigma2, self.omega0, self.omega1)


@dataclass(frozen=True)
class Observation:
    """One recorded response: (patient, cycle, slot) is unique within a trial."""

    patient: int
    cycle: int
    slot: int
    treatment: int
    response: float

    def __post_init__(self):
        if self.treatment not in (0, 1):
            raise ContractError(f"treatment must be 0 or 1, got {self.treatment}")

    def to_record(self) -> dict:
        return {
            "patient": self.patient,
            "cycle": self.cycle,
            "slot": self.slot,
            "treatment": self.treatment,
            "response": self.response,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Observation":
        return cls(
            patient=int(rec["patient"]),
            cycle=int(rec["cycle"]),
            slot=int(rec["slot"]),
            treatment=int(rec["treatment"]),
            response=float(rec["response"]),
        )


@dataclass(frozen=True)
class RandomEffects:
    """Per-patient (b0, b1) pairs, in enrollment order."""

    patients: tuple
    values: np.ndarray  # (n_patients, 2)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (len(self.patients), 2):
            raise ContractError(
                f"random effects must have shape ({len(self.patients)}, 2), got {vals.shape}"
            )
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "patients", tuple(self.patients))

    @classmethod
    def zero(cls, patients) -> "RandomEffects":
        patients = tuple(patients)
        return cls(patients, np.zeros((len(patients), 2)))

    def index_of(self, patient) -> int:
        try:
            return self.patients.index(patient)
        except ValueError:
            raise ContractError(f"patient {patient!r} has no random-effects entry") from None

    def for_patient(self, patient) -> np.ndarray:
        return self.values[self.index_of(patient)]


@dataclass(frozen=True)
class PriorSpec:
    """Independent Normal priors, one (mean, sd) pair per unconstrained coordinate."""

    means: np.ndarray
    sds: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        sds = np.asarray(self.sds, dtype=float)
        if means.shape != (N_PARAMS,) or sds.shape != (N_PARAMS,):
            raise ContractError("prior means/sds must each have 5 entries")
        if np.any(sds <= 0):
            raise DataError("all prior sds must be strictly positive")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "sds", sds)

    @classmethod
    def default(cls) -> "PriorSpec":
        """Vague default: beta ~ N(0, 100^2), log-scale coords ~ N(2.5, 1.6^2)."""
        return cls(
            means=np.array([0.0, 0.0, 2.5, 2.5, 2.5]),
            sds=np.array([100.0, 100.0, 1.6, 1.6, 1.6]),
        )

    def log_density(self, theta_vec) -> float:
        z = (np.asarray(theta_vec, dtype=float) - self.means) / self.sds
        return float(-0.5 * np.sum(z * z) - np.sum(np.log(self.sds)) - 0.5 * N_PARAMS * LOG_TWO_PI)

    def grad_log_density(self, theta_vec) -> np.ndarray:
        return -(np.asarray(theta_vec, dtype=float) - self.means) / self.sds**2

    def to_record(self) -> dict:
        return {
            name: {"mean": float(m), "sd": float(s)}
            for name, m, s in zip(PARAM_NAMES, self.means, self.sds)
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PriorSpec":
        means = [float(rec[name]["mean"]) for name in PARAM_NAMES]
        sds = [float(rec[name]["sd"]) for name in PARAM_NAMES]
        return cls(np.array(means), np.array(sds))


@dataclass(frozen=True)
class Scenario:
    """Generative truth for a simulation study (natural-scale values)."""

    beta0: float
    beta1: float
    sigma2: float
    omega0: float
    omega1: float
    n_patients: int
    n_cycles: int
    family: ResponseFamily = ResponseFamily.NORMAL
    direction: Direction = Direction.LOWER
    slots_per_cycle: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma2", "omega0", "omega1"):
            if getattr(self, name) <= 0:
                raise DataError(f"scenario.{name} must be strictly positive")
        if self.n_patients < 0 or self.n_cycles < 0:
            raise DataError("scenario sizes must be nonnegative")

    def params(self) -> PopulationParams:
        return PopulationParams.from_natural(
            self.beta0, self.beta1, self.sigma2, self.omega0, self.omega1
        )

    @property
    def patients(self) -> tuple:
        return tuple(range(1, self.n_patients + 1))

    def draw_random_effects(self, rng: np.random.Generator) -> RandomEffects:
        """Draw one frozen set of patient truths b_i ~ N(0, diag(omega0, omega1))."""
        sds = np.sqrt([self.omega0, self.omega1])
        values = rng.standard_normal((self.n_patients, 2)) * sds
        return RandomEffects(self.patients, values)


def scenario_table() -> dict[int, Scenario]:
    """The four baseline Normal-response simulation scenarios (20 patients, 3 cycles)."""
    base = dict(sigma2=9.0, omega0=2.25, omega1=2.25, n_patients=20, n_cycles=3)
    return {
        1: Scenario(beta0=25.0, beta1=-1.0, **base),
        2: Scenario(beta0=25.0, beta1=-1.0, sigma2=9.0, omega0=9.0, omega1=9.0,
                    n_patients=20, n_cycles=3),
        3: Scenario(beta0=25.0, beta1=-3.0, **base),
        4: Scenario(beta0=25.0, beta1=0.0, **base),
    }


def linear_predictor(theta: PopulationParams, b_i, d) -> float:
    """(beta0 + b0) + (beta1 + b1) d for one patient."""
    b_i = np.asarray(b_i, dtype=float)
    return float(theta.beta0 + b_i[0] + (theta.beta1 + b_i[1]) * d)


def family_mean(family: ResponseFamily, eta: float, sigma2: float) -> float:
    """Conditional mean response at linear predictor eta."""
    if family is ResponseFamily.NORMAL:
        return eta
    return math.exp(eta + 0.5 * sigma2)


def working_response(family: ResponseFamily, y: float) -> float:
    """Response on the Gaussian working scale (log y for the log-normal family)."""
    if family is ResponseFamily.LOGNORMAL:
        if y <= 0:
            raise DataError(f"log-normal responses must be positive, got {y}")
        return math.log(y)
    return float(y)


def conditional_log_likelihood(
    observations,
    theta: PopulationParams,
    b: RandomEffects,
    family: ResponseFamily,
) -> float:
    """Sum of log f(y | b, d, theta) over the observations.

    For the log-normal family this is the Normal log density at log(y) plus
    the change-of-variables term -log(y).
    """
    sigma2 = theta.sigma2
    total = 0.0
    for obs in observations:
        b_i = b.for_patient(obs.patient)
        eta = linear_predictor(theta, b_i, obs.treatment)
        t = working_response(family, obs.response)
        total += -0.5 * (LOG_TWO_PI + math.log(sigma2)) - (t - eta) ** 2 / (2.0 * sigma2)
        if family is ResponseFamily.LOGNORMAL:
            total += -t  # -log y
    return total


def random_effects_log_prior(b: RandomEffects, theta: PopulationParams) -> float:
    """Sum over patients of N(0, omega0) and N(0, omega1) log densities."""
    omega = np.array([theta.omega0, theta.omega1])
    vals = b.values
    n = len(b.patients)
    return float(
        -n * LOG_TWO_PI
        - 0.5 * n * np.sum(np.log(omega))
        - 0.5 * np.sum(vals * vals / omega)
    )


def population_log_prior(theta: PopulationParams, prior: PriorSpec) -> float:
    """Log density of the independent Normal priors at theta."""
    return prior.log_density(theta.to_array())


def simulate_response(
    scenario: Scenario,
    b_i,
    d: int,
    rng: np.random.Generator,
) -> float:
    """One draw from the conditional response distribution at treatment d."""
    theta = scenario.params()
    eta = linear_predictor(theta, b_i, d)
    draw = eta + math.sqrt(scenario.sigma2) * rng.standard_normal()
    if scenario.family is ResponseFamily.LOGNORMAL:
        # clamp keeps exp finite for astronomically improbable draws
        return math.exp(min(max(draw, -700.0), 700.0))
    return draw


@dataclass(frozen=True)
class BestTreatment:
    """Arg-optimum of a patient's true conditional mean, with exact ties flagged."""

    treatment: int
    tie: bool = False


def true_best_treatment(scenario: Scenario, b_i) -> BestTreatment:
    """Best arm for one patient under the generative truth and the scenario direction."""
    theta = scenario.params()
    m0 = family_mean(scenario.family, linear_predictor(theta, b_i, 0), scenario.sigma2)
    m1 = family_mean(scenario.family, linear_predictor(theta, b_i, 1), scenario.sigma2)
    if m0 == m1:
        return BestTreatment(0, tie=True)
    if scenario.direction is Direction.LOWER:
        return BestTreatment(0 if m0 < m1 else 1)
    return BestTreatment(0 if m0 > m1 else 1)


@dataclass(frozen=True)
class Dataset:
    """Per-patient, per-arm summary statistics of an observation set.

    Each (patient, arm) cell keeps its count, mean, and within-cell sum of
    squared deviations (two-pass, so the residual sum of squares downstream
    is a sum of explicit squares).  Plain moment statistics (t't - ...) would
    cancel catastrophically when a patient's responses are nearly constant,
    which the 1/sigma^2 weighting then amplifies into curvature-level noise.
    """

    patients: tuple
    family: ResponseFamily
    n0: np.ndarray      # (N,) placebo counts
    n1: np.ndarray      # (N,) treated counts
    mean0: np.ndarray   # (N,) placebo working-response means (0 where empty)
    mean1: np.ndarray   # (N,) treated means
    sse0: np.ndarray    # (N,) within-cell sums of squared deviations
    sse1: np.ndarray
    jacobian: float     # -sum(log y) for log-normal, else 0
    n_total: int
    observations: tuple = field(repr=False, default=())

    @classmethod
    def from_observations(cls, observations, patients, family: ResponseFamily) -> "Dataset":
        patients = tuple(patients)
        index = {p: i for i, p in enumerate(patients)}
        N = len(patients)
        observations = tuple(observations)
        cells: list[list[list[float]]] = [[[], []] for _ in range(N)]
        jac = 0.0
        for obs in observations:
            if obs.patient not in index:
                raise ContractError(f"observation for unknown patient {obs.patient!r}")
            t = working_response(family, obs.response)
            cells[index[obs.patient]][obs.treatment].append(t)
            if family is ResponseFamily.LOGNORMAL:
                jac -= t
        n0 = np.zeros(N); n1 = np.zeros(N)
        mean0 = np.zeros(N); mean1 = np.zeros(N)
        sse0 = np.zeros(N); sse1 = np.zeros(N)
        for i in range(N):
            for d, (narr, marr, sarr) in ((0, (n0, mean0, sse0)), (1, (n1, mean1, sse1))):
                vals = cells[i][d]
                if not vals:
                    continue
                arr = np.asarray(vals)
                narr[i] = len(vals)
                marr[i] = float(np.mean(arr))
                sarr[i] = float(np.sum((arr - marr[i]) ** 2))
        return cls(
            patients=patients, family=family, n0=n0, n1=n1, mean0=mean0,
            mean1=mean1, sse0=sse0, sse1=sse1, jacobian=jac,
            n_total=len(observations), observations=observations,
        )

    @property
    def n(self) -> np.ndarray:
        return self.n0 + self.n1

    def with_observation(self, obs: Observation) -> "Dataset":
        """New dataset with one extra observation.

        Rebuilt from the raw log rather than updated incrementally so that a
        dataset reconstructed from a serialized observation list is
        bit-identical to one grown observation by observation.
        """
        if obs.patient not in self.patients:
            raise ContractError(f"observation for unknown patient {obs.patient!r}")
        return Dataset.from_observations(
            self.observations + (obs,), self.patients, self.family
        )
