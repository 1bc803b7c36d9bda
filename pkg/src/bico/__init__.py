"""Budgeted trade-off between simulation optimisation and input-data collection.

A Gaussian-process surrogate over the joint solution-parameter space is
combined with a Bayesian belief over the true simulator parameters; each
loop iteration values one more simulation against one more external data
sample per unit cost and performs the better action.
"""

__version__ = "0.1.0"

from .acquisition import (
    DiscretizationSet,
    InnerOptConfig,
    VoiEstimate,
    kg_discrete,
    make_discretization,
    max_voi_simulation,
    predicted_performance,
    recommend,
    voi_simulation,
    voi_source,
)
from .errors import ConfigError, NumericError
from .gp import (
    GpHyperparams,
    GpPosterior,
    JointPoint,
    SimulationDataset,
    fit,
    fit_hyperparameters,
    kernel_eval,
    log_marginal_likelihood,
    posterior_cov,
    posterior_mean,
    posterior_var,
    predictive_y_params,
    sigma_tilde,
)
from .loop import (
    Action,
    BicoConfig,
    BudgetLedger,
    IterationLog,
    RunResult,
    run_bico,
    run_fixed_fraction,
    run_random,
)
from .optim import BoxBounds, lhs_sample, multistart_max, nelder_mead_max
from .posterior import (
    ParameterPosterior,
    SourceDataset,
    SourceSpec,
    importance_weight,
    log_pdf,
    predictive_sample,
    sample_posterior,
    update_posterior,
)
from .testbeds import (
    GpTestFunction,
    NewsvendorConfig,
    TruthOracle,
    gp_testfunc_build,
    gp_testfunc_simulate,
    make_newsvendor_oracle,
    newsvendor_simulate,
    newsvendor_theta,
    newsvendor_xstar,
    opportunity_cost,
    source_simulate,
)

__all__ = [name for name in dir() if not name.startswith("_")]
