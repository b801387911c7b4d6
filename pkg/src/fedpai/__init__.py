"""Deterministic federated-learning simulator with pruning at initialization.

Unstructured gradient-flow pruning (client- or server-side), structured
early-bird channel pruning with regrouping, and an iterative-magnitude
baseline, all over a small float64 autodiff kernel with exact
communication accounting.
"""

from .config import ExperimentConfig, expand_cells, parse_config
from .data import Dataset, PartitionPlan, make_synthetic, partition_dirichlet, partition_iid
from .errors import (
    ConfigError,
    FedPaiError,
    LayoutError,
    NumericsError,
    PartitionError,
    PayloadError,
    SpecError,
)
from .federation import (
    STRATEGIES,
    ClientState,
    ServerState,
    StrategyConfig,
    aggregate_fedavg,
    aggregate_sparsity_aware,
    local_train,
    run_experiment,
    run_round,
    sample_clients,
)
from .metrics import (
    RoundReport,
    SparsePayload,
    compression_rate,
    decode_sparse,
    encode_sparse,
    evaluate,
    flops_forward,
    wire_compression,
)
from .model import (
    Conv2d,
    Dense,
    Flatten,
    ModelSpec,
    ModelState,
    ReLU,
    cnn_spec,
    forward,
    init_weights,
    loss_and_grad,
    mlp_spec,
    sgd_step,
)
from .pruning import (
    ImportanceScore,
    Mask,
    apply_mask,
    grasp_score,
    iterative_prune_schedule,
    magnitude_mask,
    top_kappa_mask,
)
from .structured import (
    ChannelMask,
    MaskHistory,
    channel_importance,
    channel_mask_from_scores,
    ebt_check,
    hamming_distance,
    regroup,
)
from .tensor import Tensor

__version__ = "0.1.0"
