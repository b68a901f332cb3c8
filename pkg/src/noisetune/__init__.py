"""Per-sample test-time noise tuning for a frozen toy dual encoder."""

from .augment import ViewBatch, generate_views
from .data import DatasetSpec, SyntheticDataset, load_dataset, make_synthetic_shift_dataset, save_dataset
from .encoder import (
    ClassEmbeddings,
    EncoderConfig,
    EncoderModel,
    compute_logits,
    derive_class_embeddings,
    encode_image,
    init_model,
    load_class_embeddings,
    load_model,
    save_model,
)
from .engine import AdaptationConfig, adapt, infer, run_episode, zero_shot_infer
from .estimator import TestTimeNoiseTuner, ZeroShotClassifier
from .exceptions import (
    AdaptationError,
    ConfigError,
    DegenerateInputError,
    DimensionError,
    DomainError,
    NoiseTuneError,
    NonFiniteError,
    ParameterError,
    UsageError,
)
from .harness import VARIANTS, ExperimentConfig, RunReport, gradcheck, run_ablation, run_experiment
from .metrics import PredictionRecord, ece, self_entropy, top1_accuracy

__version__ = "0.1.0"

__all__ = [
    "ViewBatch", "generate_views",
    "DatasetSpec", "SyntheticDataset", "load_dataset", "make_synthetic_shift_dataset", "save_dataset",
    "ClassEmbeddings", "EncoderConfig", "EncoderModel", "compute_logits", "derive_class_embeddings",
    "encode_image", "init_model", "load_class_embeddings", "load_model", "save_model",
    "AdaptationConfig", "adapt", "infer", "run_episode", "zero_shot_infer",
    "TestTimeNoiseTuner", "ZeroShotClassifier",
    "AdaptationError", "ConfigError", "DegenerateInputError", "DimensionError", "DomainError",
    "NoiseTuneError", "NonFiniteError", "ParameterError", "UsageError",
    "VARIANTS", "ExperimentConfig", "RunReport", "gradcheck", "run_ablation", "run_experiment",
    "PredictionRecord", "ece", "self_entropy", "top1_accuracy",
]
