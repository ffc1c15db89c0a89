"""Score-based solver for high-dimensional Fokker-Planck log-likelihoods.

Fits the score of an SDE's marginal density (conditional score matching,
sliced score matching, or a score-PDE residual loss), then recovers the
log-likelihood by training against the LL evolution ODE with the score
frozen. Ships analytic SDE benchmarks, a probability-flow sampler, a
direct-LL baseline, and overflow-free Monte Carlo reference tooling.
"""

from .diffnet import DiffNet, init_diffnet, load_checkpoint, save_checkpoint
from .distributions import (
    CovarianceSpec,
    Density,
    cauchy_density,
    gaussian_density,
    laplace_density,
    log_normal_density,
    make_covariance,
    unit_gaussian,
)
from .metrics_io import (
    ErrorReport,
    ExperimentConfig,
    emit_results,
    pdf_errors_from_ll,
    relative_errors,
    run_experiment,
)
from .mc_reference import (
    LogSumEstimate,
    convolution_experiment,
    ll_normalize_and_sum,
    mc_marginal_ll,
)
from .objectives import (
    LLModel,
    LossWeights,
    ScoreModel,
    loss_ll_ode,
    loss_score_pinn,
    loss_sm,
    loss_ssm,
)
from .sde_problems import (
    SdeProblem,
    euler_maruyama,
    flow_ode_sample,
    make_gbm,
    make_ou,
    make_ou_nongaussian,
    make_varying_eigenspace,
)
from .training import (
    AdamState,
    TrainConfig,
    adam_step,
    lr_at,
    train_direct_ll,
    train_ll,
    train_score,
)

__version__ = "0.1.0"
