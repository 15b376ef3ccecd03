"""Treatment-selection policies: information-gain optimal, MAB, and randomized.

The optimal policy scores each candidate arm by the expected Kullback-Leibler
divergence from the current posterior approximation to the one-observation-
ahead refit, estimated by Monte Carlo over joint draws of (theta, b_i) and a
predictive response.  The MAB policy randomizes each allocation with the
posterior probability that the arm is the better one for that patient
(probability matching).  The randomized comparator fixes a per-cycle balanced
sequence before the trial starts.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ContractError, DataError, Nof1Error
from .laplace import PosteriorApprox, fit_posterior
from .model import (
    Dataset,
    Direction,
    Observation,
    PopulationParams,
    PriorSpec,
    ResponseFamily,
)

MIN_Q = 100


class PolicyKind(str, enum.Enum):
    OPTIMAL = "optimal"
    MAB = "mab"
    RANDOMIZED = "randomized"


class PolicyError(Nof1Error, RuntimeError):
    """A policy could not produce an allocation."""


@dataclass(frozen=True)
class PolicyConfig:
    kind: PolicyKind
    q_utility: int = 200
    q_mab: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if self.q_utility < MIN_Q:
            raise DataError(f"q_utility must be >= {MIN_Q}, got {self.q_utility}")
        if self.q_mab < MIN_Q:
            raise DataError(f"q_mab must be >= {MIN_Q}, got {self.q_mab}")

    def to_record(self) -> dict:
        return {"kind": self.kind.value, "q_utility": self.q_utility, "q_mab": self.q_mab}

    @classmethod
    def from_record(cls, rec: dict) -> "PolicyConfig":
        return cls(
            kind=PolicyKind(rec["kind"]),
            q_utility=int(rec.get("q_utility", 200)),
            q_mab=int(rec.get("q_mab", 1000)),
        )


@dataclass(frozen=True)
class DecisionContext:
    """Everything a policy needs to score candidate arms at the cursor."""

    data: Dataset
    prior: PriorSpec
    posterior: PosteriorApprox
    family: ResponseFamily
    direction: Direction
    patient: int
    cycle: int
    slot: int


# ---------------------------------------------------------------------------
# KL divergence between multivariate normals
# ---------------------------------------------------------------------------

def kld_mvn(mean0, cov0, mean1, cov1) -> float:
    """KL(N1 || N0) where N0 plays the prior role.

    0.5 * [tr(S0^-1 S1) + (m1-m0)' S0^-1 (m1-m0) - eta + log det S0 - log det S1],
    computed through Cholesky factors, never an explicit inverse.
    """
    mean0 = np.asarray(mean0, dtype=float).reshape(-1)
    mean1 = np.asarray(mean1, dtype=float).reshape(-1)
    cov0 = np.atleast_2d(np.asarray(cov0, dtype=float))
    cov1 = np.atleast_2d(np.asarray(cov1, dtype=float))
    eta = mean0.size
    if mean1.size != eta or cov0.shape != (eta, eta) or cov1.shape != (eta, eta):
        raise ContractError("KL divergence needs equal-dimension mean/cov pairs")
    try:
        L0 = np.linalg.cholesky(cov0)
        L1 = np.linalg.cholesky(cov1)
    except np.linalg.LinAlgError as exc:
        raise ContractError(f"KL divergence inputs must be positive definite: {exc}") from None
    M = scipy.linalg.solve_triangular(L0, L1, lower=True)
    trace = float(np.sum(M * M))
    s = scipy.linalg.solve_triangular(L0, mean1 - mean0, lower=True)
    quad = float(s @ s)
    log_det0 = 2.0 * float(np.sum(np.log(np.diag(L0))))
    log_det1 = 2.0 * float(np.sum(np.log(np.diag(L1))))
    return 0.5 * (trace + quad - eta + log_det0 - log_det1)


def kld_posteriors(prior_approx: PosteriorApprox, post_approx: PosteriorApprox) -> float:
    if prior_approx.patients != post_approx.patients:
        raise ContractError("posterior pair covers different patients")
    return kld_mvn(prior_approx.mean, prior_approx.cov, post_approx.mean, post_approx.cov)


# ---------------------------------------------------------------------------
# expected information-gain utility
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PredictiveDraws:
    """Common random numbers shared by both candidate arms at one decision."""

    thetas: np.ndarray  # (Q, 5)
    b_i: np.ndarray     # (Q, 2) draws for the cursor patient
    noise: np.ndarray   # (Q,) standard normal response noise


def sample_predictive_inputs(ctx: DecisionContext, q: int,
                             rng: np.random.Generator) -> PredictiveDraws:
    thetas, bs = ctx.posterior.sample(rng, q)
    i = ctx.posterior.patient_index(ctx.patient)
    return PredictiveDraws(thetas=thetas, b_i=bs[:, i, :], noise=rng.standard_normal(q))


@dataclass
class UtilityEvaluation:
    treatment: int
    expected_utility: float
    per_draw: np.ndarray
    n_discarded: int


def expected_utility(candidate: int, ctx: DecisionContext, q: int | None = None,
                     rng: np.random.Generator | None = None,
                     draws: PredictiveDraws | None = None) -> UtilityEvaluation:
    """Monte Carlo expected KL gain of allocating ``candidate`` at the cursor.

    Each draw simulates a response from the drawn parameters, refits the
    posterior on the augmented data (warm started at the current mode), and
    scores the divergence of the refit from the current approximation.
    Draws whose refit fails are discarded; more than 10% discarded aborts.
    """
    if draws is None:
        if rng is None or q is None:
            raise ContractError("expected_utility needs either draws or (q, rng)")
        draws = sample_predictive_inputs(ctx, q, rng)
    n_draws = draws.noise.size
    theta_star = ctx.posterior.theta_star()
    utilities = []
    discarded = 0
    for s in range(n_draws):
        theta_q = PopulationParams.from_array(draws.thetas[s])
        eta = theta_q.beta0 + draws.b_i[s, 0] + (theta_q.beta1 + draws.b_i[s, 1]) * candidate
        w = eta + math.sqrt(theta_q.sigma2) * draws.noise[s]
        if ctx.family is ResponseFamily.LOGNORMAL:
            y = math.exp(min(max(w, -700.0), 700.0))
        else:
            y = w
        obs = Observation(ctx.patient, ctx.cycle, ctx.slot, candidate, y)
        try:
            refit = fit_posterior(ctx.data.with_observation(obs), ctx.prior,
                                  warm_start=theta_star)
            utilities.append(kld_posteriors(ctx.posterior, refit.posterior))
        except Nof1Error:
            discarded += 1
    if discarded > 0.1 * n_draws:
        raise PolicyError(
            f"utility evaluation for arm {candidate} discarded {discarded}/{n_draws} draws"
        )
    per_draw = np.array(utilities)
    return UtilityEvaluation(
        treatment=candidate,
        expected_utility=float(np.mean(per_draw)),
        per_draw=per_draw,
        n_discarded=discarded,
    )


def select_optimal(ctx: DecisionContext, q: int, rng: np.random.Generator
                   ) -> tuple[int, dict]:
    """Argmax of the expected utility over both arms, common random numbers.

    Exact ties are broken by a fair coin from the same policy stream.  If one
    arm's evaluation fails the other is taken; both failing is a policy error.
    """
    draws = sample_predictive_inputs(ctx, q, rng)
    evals: dict[int, UtilityEvaluation | None] = {}
    for arm in (0, 1):
        try:
            evals[arm] = expected_utility(arm, ctx, draws=draws)
        except PolicyError:
            evals[arm] = None
    if evals[0] is None and evals[1] is None:
        raise PolicyError("expected utility evaluation failed for both arms")
    if evals[0] is None:
        chosen = 1
    elif evals[1] is None:
        chosen = 0
    elif evals[1].expected_utility > evals[0].expected_utility:
        chosen = 1
    elif evals[1].expected_utility < evals[0].expected_utility:
        chosen = 0
    else:
        chosen = int(rng.integers(0, 2))
    diagnostics = {
        "expected_utility": {
            str(arm): (None if evals[arm] is None else evals[arm].expected_utility)
            for arm in (0, 1)
        },
        "n_discarded": {
            str(arm): (None if evals[arm] is None else evals[arm].n_discarded)
            for arm in (0, 1)
        },
    }
    return chosen, diagnostics


# ---------------------------------------------------------------------------
# multi-armed bandit (probability matching at the individual level)
# ---------------------------------------------------------------------------

def mab_reward_probability(posterior: PosteriorApprox, patient: int,
                           family: ResponseFamily, direction: Direction,
                           q: int, rng: np.random.Generator) -> tuple[float, float]:
    """Posterior probability that each arm is the better one for this patient.

    Draws (theta, b_i) jointly, computes both arms' conditional means through
    the family mean function, and counts which arm wins under the direction
    convention.  Exact ties count for arm 0, so the two probabilities sum to
    one by construction.  For the log-normal family the comparison uses log
    means, which order identically and cannot overflow.
    """
    thetas, bs = posterior.sample(rng, q)
    i = posterior.patient_index(patient)
    eta0 = thetas[:, 0] + bs[:, i, 0]
    eta1 = eta0 + thetas[:, 1] + bs[:, i, 1]
    if family is ResponseFamily.LOGNORMAL:
        # log of exp(eta + sigma2/2); same order as the mean, no overflow
        half_sigma2 = 0.5 * np.exp(2.0 * np.clip(thetas[:, 2], -40.0, 40.0))
        m0, m1 = eta0 + half_sigma2, eta1 + half_sigma2
    else:
        m0, m1 = eta0, eta1
    if direction is Direction.LOWER:
        wins1 = m1 < m0
    else:
        wins1 = m1 > m0
    p1 = float(np.count_nonzero(wins1)) / q
    return 1.0 - p1, p1


def mab_select(posterior: PosteriorApprox, patient: int, family: ResponseFamily,
               direction: Direction, q: int, rng: np.random.Generator
               ) -> tuple[int, dict]:
    """Thompson-style randomization: d ~ Bernoulli(p_hat_i(1))."""
    p0, p1 = mab_reward_probability(posterior, patient, family, direction, q, rng)
    chosen = int(rng.random() < p1)
    return chosen, {"reward_probability": {"0": p0, "1": p1}}


# ---------------------------------------------------------------------------
# randomized comparator
# ---------------------------------------------------------------------------

def randomized_sequence(n_cycles: int, slots_per_cycle: int = 2,
                        rng: np.random.Generator | None = None) -> list[int]:
    """Pre-trial treatment sequence, each cycle a uniform permutation of {0, 1}."""
    if slots_per_cycle != 2:
        raise ContractError("randomized sequences are defined for two-slot cycles")
    if rng is None:
        raise ContractError("randomized_sequence needs an explicit random stream")
    seq: list[int] = []
    for _ in range(n_cycles):
        seq.extend(int(v) for v in rng.permutation(2))
    return seq
