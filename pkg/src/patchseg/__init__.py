"""Weakly supervised patch-level semantic segmentation toolkit."""

from .conditioning import ConditionedGrid, HVBiLSTM, condition
from .container import load_arrays, save_arrays
from .data import DatasetSpec, SyntheticSample, augment, generate, load_dataset, save_dataset
from .encoder import EncoderConfig, PatchEncoder, attention, encode, load_features, save_features
from .equivariance import (
    GridTransform,
    MergedBatch,
    apply_inverse_on_grid,
    apply_inverse_transform,
    apply_on_grid,
    apply_transform,
    et_loss,
    inverse_merge,
    merge_four,
    two_branch_step,
)
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    GenerationError,
    NumericError,
    PatchsegError,
    ShapeError,
)
from .model import CamModel, SegModel
from .pcm_core import (
    ClassWeights,
    ImagePrediction,
    LabelVector,
    PatchClassDistribution,
    PatchFeatureGrid,
    gmp,
    mce_grad_analytic,
    mce_loss,
    patch_distribution,
    patch_logits,
    pseudo_mask,
)
from .train_eval import (
    Checkpoint,
    EvalReport,
    TrainConfig,
    ablation,
    cam_baseline_train_eval,
    evaluate,
    gradcheck,
    load_checkpoint,
    save_checkpoint,
    toggle_configs,
    train,
)

__version__ = "0.1.0"
