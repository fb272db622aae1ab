"""Tri-modal embedding alignment via triangle-area similarity.

Public surface: geometric kernels and their gradients, the dense encoder
stack, contrastive/matching losses, synthetic data and file formats, the
training loop, and retrieval evaluation. The ``tri`` console script wires
these together behind a JSON run config.
"""

from .errors import ConfigError, FormatError, NumericalAbort
from .geometry import (
    Orientation,
    ScoreMatrix,
    TriangleGrad,
    batch_area_matrix,
    cosine,
    gram_volume,
    regularized_score,
    symile_mip,
    triangle_area,
    triangle_area_grad,
)
from .nn import (
    DenseLayer,
    EncoderStack,
    Mlp,
    ModelConfig,
    ParamView,
    build_matcher,
    build_stack,
    embed_batch,
    load_checkpoint,
    save_checkpoint,
)
from .losses import (
    LossConfig,
    LossOutput,
    Objective,
    dtm_loss,
    gram_contrastive,
    pairwise_anchor_loss,
    symile_contrastive,
    total_loss,
    triangle_contrastive,
)
from .data import (
    SyntheticSpec,
    TriModalBatch,
    TriModalDataset,
    generate_synthetic,
    load_manifest,
    make_batches,
    parse_idx,
    read_tensor_file,
    write_tensor_file,
)
from .train import Adam, OptimConfig, RunLog, TrainResult, lr_at, step_sgd, train
from .evaluation import (
    ConvergenceReport,
    RetrievalReport,
    classify_zero_shot,
    compare_convergence,
    evaluate_stack,
    recall_at_k,
    score_all,
    track_positive_area,
)
from .config import RunConfig, default_config, load_config

__version__ = "0.1.0"
