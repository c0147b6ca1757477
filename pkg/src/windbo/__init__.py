"""Wind-informed Gaussian-process Bayesian optimisation on concentration grids.

Kernels that encode a prevailing wind direction (a sum and a product of
radial and cross-wind components), exact GP inference, prior-driven
multi-start hyperparameter fitting with BIC model comparison, an image
pipeline (filtering, ranked subsets, log normalization, synthetic
plumes), and a UCB Bayesian-optimisation loop with a random baseline.
The ``windbo`` command line wires them together end to end.
"""

from .bo import (
    AcquisitionField,
    BaselineResult,
    BoConfig,
    BoTrace,
    NoCandidates,
    acquisition_field,
    bo_step,
    evaluate,
    random_baseline,
    run_bo,
    running_average,
    ucb,
)
from .data import (
    DegenerateStats,
    Image,
    InsufficientImages,
    NormStats,
    ParseError,
    SubsetBundle,
    build_subsets,
    compute_norm_stats,
    denormalize,
    filter_missing,
    image_dataset,
    load_image,
    normalize,
    save_image,
    synth_plume,
)
from .gp import (
    Dataset,
    FactorizationFailure,
    ModelSpec,
    Posterior,
    lml_gradient,
    log_marginal_likelihood,
    posterior,
)
from .hyper import (
    AllRestartsFailed,
    BicScore,
    FitResult,
    HyperPrior,
    LogNormalParams,
    NonPositiveSample,
    PriorConstructionFailure,
    bic,
    build_priors,
    fit_lognormal,
    multistart_fit,
    theta_names,
)
from .kernels import (
    KERNELS,
    ProductParams,
    RbfParams,
    SumParams,
    WindGeometry,
    canonical_angle,
    crosswind_projector,
    elongation_matrix,
    gram_matrix,
    kernel_gradient,
    orthogonal_distance,
    pairwise_displacements,
    product_kernel,
    rbf,
    sum_kernel,
    wind_vector,
)

__version__ = "0.1.0"

__all__ = [
    "AcquisitionField",
    "AllRestartsFailed",
    "BaselineResult",
    "BicScore",
    "BoConfig",
    "BoTrace",
    "Dataset",
    "DegenerateStats",
    "FactorizationFailure",
    "FitResult",
    "HyperPrior",
    "Image",
    "InsufficientImages",
    "KERNELS",
    "LogNormalParams",
    "ModelSpec",
    "NoCandidates",
    "NonPositiveSample",
    "NormStats",
    "ParseError",
    "Posterior",
    "PriorConstructionFailure",
    "ProductParams",
    "RbfParams",
    "SubsetBundle",
    "SumParams",
    "WindGeometry",
    "acquisition_field",
    "bic",
    "bo_step",
    "build_priors",
    "build_subsets",
    "canonical_angle",
    "compute_norm_stats",
    "crosswind_projector",
    "denormalize",
    "elongation_matrix",
    "evaluate",
    "filter_missing",
    "fit_lognormal",
    "gram_matrix",
    "image_dataset",
    "kernel_gradient",
    "lml_gradient",
    "load_image",
    "log_marginal_likelihood",
    "multistart_fit",
    "normalize",
    "orthogonal_distance",
    "pairwise_displacements",
    "posterior",
    "product_kernel",
    "random_baseline",
    "rbf",
    "run_bo",
    "running_average",
    "save_image",
    "sum_kernel",
    "synth_plume",
    "theta_names",
    "ucb",
    "wind_vector",
]
