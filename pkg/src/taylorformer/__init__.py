"""Taylorformer: autoregressive, uncertainty-aware attention for
continuous processes, with local Taylor features and a value-linear
attention channel."""

from .autodiff import (
    Tensor,
    backward,
    finite_diff_check,
    gradients,
    no_grad,
)
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    GenerationError,
    NumericError,
    ShapeError,
    TaylorformerError,
)
from .evaluation import (
    ConsistencyReport,
    Trajectories,
    ablation_matrix,
    autoregressive_generate,
    consistency_report,
    eval_mse,
    eval_nll,
    model_joint_loglik,
)
from .features import (
    FeaturePack,
    build_mask,
    local_taylor_mean,
    nearest_seen_neighbour,
    positional_encode,
    representation_extractor,
)
from .gp import KernelSpec, kernel_eval, sample_gp_tasks
from .network import (
    GaussianPrediction,
    ModelConfig,
    forward,
    gaussian_nll,
    init_params,
    load_checkpoint,
    matched_config,
    parameter_count,
    save_checkpoint,
)
from .series import load_series_csv, make_forecast_tasks, synth_sine_series
from .tasks import TaskBatch, load_tasks, rng_stream, save_tasks
from .training import (
    AdamState,
    TrainConfig,
    TrainResult,
    adam_update,
    shuffle_targets,
    train_loop,
    train_step,
)

__version__ = "0.1.0"
