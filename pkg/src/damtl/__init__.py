"""damtl: multi-task image classification with soft-masked knowledge
transfer from a pretrained auxiliary network and class-conditional
feature alignment."""

__version__ = "0.1.0"

from .alignment import alignment_total, class_means, cmmd
from .autodiff import (
    GradCheckReport,
    Tensor,
    add,
    add_bias,
    backward,
    conv2d,
    grad_check,
    hadamard,
    l1_norm,
    matmul,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    softmax_cross_entropy,
)
from .config import ExperimentConfig, load_experiment_config
from .data import (
    LabeledSet,
    OverlapSpec,
    TaskDataset,
    batches,
    load_csv,
    load_idx,
    make_synthetic,
    save_csv,
    split_tasks,
)
from .errors import (
    CheckFailure,
    ConfigError,
    DamtlError,
    DataError,
    MaskConstraintError,
    ShapeError,
)
from .network import (
    Architecture,
    AuxModel,
    TaskNetwork,
    default_architecture,
    extract_knowledge,
    init_task,
    masked_conv_forward,
    parameter_digest,
)
from .training import (
    EpochMetrics,
    PretrainConfig,
    TrainConfig,
    TrainResult,
    evaluate,
    pretrain_aux,
    sgd_step,
    task_loss,
    total_loss,
    train_damtl,
)
