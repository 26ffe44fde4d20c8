"""Low-rank Bayesian tensorized neural networks.

Weight matrices live in TT-matrix form; a rank-coupled Gaussian/Gamma
prior shrinks TT ranks during training; inference is MAP gradient ascent
or Stein variational gradient descent over a particle ensemble.  Training
a model therefore yields both a compressed network (via automatic rank
determination) and predictive uncertainty (via the ensemble).
"""

from .archive import Archive, load_archive, read_archive, save_archive, write_archive
from .data import Batch, BatchPlan, DataError, Dataset, load_idx, make_toy
from .inference import (
    MAPConfig,
    ParticleLayout,
    SVGDConfig,
    map_train,
    median_bandwidth,
    perturbed_ensemble,
    predictive_distribution,
    rbf_kernel,
    svgd_step,
    svgd_train,
    test_log_likelihood,
)
from .model import (
    LayerParams,
    LayerSpec,
    Network,
    NumericError,
    Particle,
    cross_entropy,
    forward,
    grad_log_likelihood,
    grad_log_posterior,
    init_particle,
    log_posterior,
)
from .priors import InitConfig, PriorConfig, init_cores, init_rank_scales, log_prior
from .pruning import (
    PruneReport,
    RankEstimate,
    ThresholdPolicy,
    estimate_ranks,
    posterior_mean_rank_scales,
    prune_model,
)
from .tt import (
    FactorizedShape,
    TTMatrix,
    TTShapeError,
    conv_kernel_reshape,
    conv_kernel_restore,
    index_to_multi,
    multi_to_index,
    tt_matvec,
    tt_param_count,
    tt_reconstruct,
    tt_truncate,
)

__version__ = "0.1.0"
