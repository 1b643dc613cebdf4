"""Context-masked Siamese regression for zero-shot dynamics prediction."""

from .autodiff import Node, ParameterStore, backward
from .data import (
    Dataset,
    Sample,
    load_push_dataset,
    make_pairs,
    rbf_kernel_matrix,
    save_dataset,
    simulate_gp_dataset,
    split_setup,
)
from .errors import ConfigError, CtxmaskError, DataError, NumericError, ShapeError
from .evaluation import (
    ExperimentConfig,
    MetricReport,
    mean_predicted_std,
    rmse,
    rmse_to_mm,
    run_experiment,
)
from .model import (
    ContextVector,
    GaussianPrediction,
    ModelSpec,
    context_distance,
    context_mask,
    forward,
    gaussian_nll,
    init_params,
    pair_loss,
)
from .numeric import RngState, cholesky, matmul, sample_standard_normal, sample_uniform
from .training import AdamState, TrainConfig, adam_step, train

__version__ = "0.1.0"
