"""Robust semiparametric Bayesian inference for mean responses under missing data.

A sum-of-trees outcome posterior combined with Bayesian-bootstrap weights
gives draws of the plug-in or one-step functional; a pilot-based correction
term subtracted from every draw removes the bias that survives the one-step
construction when the outcome regression is too rough. Treatment-effect
(ATE/ATT) variants, a Monte Carlo comparison harness, and a CLI are included.
"""

__version__ = "0.1.0"

from .bart import (
    BartConfig,
    BartState,
    PosteriorDraws,
    calibrate_sigma_lambda,
    gibbs_leaf_update,
    gibbs_sigma_update,
    gibbs_split_prob_update,
    integrated_leaf_loglik,
    log_tree_prior,
    mh_tree_update,
    run_bart_binary,
    run_bart_regression,
)
from .correction import (
    CredibleSummary,
    DrawSet,
    MeanResponsePilots,
    MissingDataset,
    TreatmentDataset,
    TreatmentPilots,
    aipw_point_estimate,
    bayesian_bootstrap_weights,
    chi_draw,
    credible_interval,
    debias_term,
    oracle_bias_term,
    run_att,
    run_ate,
    run_mean_response,
)
from .pilots import (
    FeatureMap,
    PilotFit,
    fit_logit_irls,
    fit_outcome_pilot,
    fit_propensity_logit,
    predict_outcome,
    predict_propensity,
    riesz_representer,
    stack_pilots,
)
from .rng import RngStream, derive_stream, sample, substream
from .simlab import (
    DESIGNS,
    MCReport,
    SimSettings,
    format_report,
    gen_covariates,
    gen_missing_data,
    run_mc,
    true_mean,
)
from .trees import (
    Forest,
    SplitRule,
    Tree,
    evaluate_forest,
    evaluate_tree,
    grow_candidates,
    leaf_assignments,
    tree_dump,
    validate_tree,
)
