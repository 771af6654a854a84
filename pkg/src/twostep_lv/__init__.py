"""Two-step pseudo-maximum-likelihood estimation for latent variable
models, with naive, asymptotic, and simulation-based standard errors."""

from .errors import (
    ConvergenceError,
    DataError,
    NumericError,
    SeparationError,
    TwoStepError,
)
from .model_core import (
    CovMatrix,
    ParamVector,
    RngStream,
    mvn_sample,
    numeric_gradient,
    numeric_hessian_block,
    psd_repair,
    sample_covariance,
)
from .data import Dataset, load_config_file, load_dataset, save_dataset
from .variance import (
    InformationBlocks,
    RefitResult,
    VarianceReport,
    asymptotic_variance,
    assemble_sigma11,
    full_information,
    naive_variance,
    simulation_variance,
    simulation_variance_multi,
    wald_interval,
)
from .latent_class import (
    LcaConfig,
    LcaCovariateStructuralParams,
    LcaDistalStructuralParams,
    LcaMeasurementParams,
    align_classes,
    class_posteriors,
    lca_covariate_model,
    lca_distal_model,
    lca_onestep,
    lca_pattern_prob,
    lca_step1_em,
    lca_step2_covariate,
    lca_step2_distal,
    relabel_step1,
)
from .latent_trait import (
    IrtConfig,
    IrtMeasurementParams,
    TraitEquation,
    TraitStructuralSpec,
    combine_trait_blocks,
    gh_marginal_loglik,
    irt_item_prob,
    irt_onestep,
    irt_step1_fit,
    irt_step2_fit,
    trait_model,
)
from .sim_study import (
    ClassScenario,
    TraitScenario,
    entropy_r2,
    gen_class_data,
    gen_trait_data,
    run_study,
    solve_lambda_from_r2,
)

__version__ = "0.1.0"
