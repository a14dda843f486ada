"""Multiple-instance-learning lab.

Gated-attention bag aggregators (single- and multi-head) with mean/max
pooling baselines, a soft-bag benchmark generator over IDX image files,
Adam training with validation-based selection, rank-based evaluation
metrics, and exact parameter/FLOP accounting.
"""

from .bags import (
    Bag,
    BagSplits,
    SoftBagConfig,
    load_feature_bags,
    load_idx_images,
    load_idx_labels,
    make_soft_bags,
    parse_idx,
    write_feature_bags,
)
from .metrics import (
    ScoredPrediction,
    accuracy,
    macro_f1,
    mean_std,
    roc_auc,
)
from .models import (
    ModelConfig,
    ModelParams,
    attention_weights,
    flops,
    forward,
    init_params,
    param_count,
    predict_logits,
    predict_proba,
)
from .tensor import Tensor, cross_entropy, finite_difference_gradient
from .training import (
    RunResult,
    TrainConfig,
    evaluate,
    grid_search,
    sweep_heads,
    sweep_seeds,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Bag",
    "BagSplits",
    "ModelConfig",
    "ModelParams",
    "RunResult",
    "ScoredPrediction",
    "SoftBagConfig",
    "Tensor",
    "TrainConfig",
    "accuracy",
    "attention_weights",
    "cross_entropy",
    "evaluate",
    "finite_difference_gradient",
    "flops",
    "forward",
    "grid_search",
    "init_params",
    "load_feature_bags",
    "load_idx_images",
    "load_idx_labels",
    "macro_f1",
    "make_soft_bags",
    "mean_std",
    "param_count",
    "parse_idx",
    "predict_logits",
    "predict_proba",
    "roc_auc",
    "sweep_heads",
    "sweep_seeds",
    "train",
    "write_feature_bags",
]
