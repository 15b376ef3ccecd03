"""Bayesian adaptive design engine for aggregated N-of-1 trials."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
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
from .laplace import (  # noqa: E402
    FitResult,
    InnerSolve,
    ISResult,
    ModeResult,
    PosteriorApprox,
    assemble_posterior,
    conditional_laplace_posterior,
    fit_posterior,
    inner_mode,
    joint_log_density,
    laplace_marginal_loglik,
    posterior_mode,
    reference_posterior_is,
    snis,
)
from .policies import (  # noqa: E402
    DecisionContext,
    PolicyConfig,
    PolicyKind,
    UtilityEvaluation,
    expected_utility,
    kld_mvn,
    kld_posteriors,
    mab_reward_probability,
    mab_select,
    randomized_sequence,
    select_optimal,
)
from .engine import (  # noqa: E402
    StudyConfig,
    StudyResult,
    TrialConfig,
    TrialState,
    accept,
    metric_best_prob,
    metric_best_received,
    metric_log_det,
    propose,
    run_study,
    run_trial,
    step,
)
