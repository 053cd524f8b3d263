"""Structured label refinement by residual message-passing layers.

Scene-, action-, and pose-score vectors for one video frame are refined
jointly over K steps: sparsely connected factor neurons with shared
parameter templates score label dependencies, and their weighted outputs
are added back onto the scores belief-propagation style.  Everything is
plain numpy with hand-derived gradients.
"""

from .config import (
    ConfigError,
    LabelSpaces,
    ModelConfig,
    Topology,
    build_topology,
    dimensions_fingerprint,
    load_config,
    parse_config_text,
    validate_config,
)
from .data import (
    DataError,
    Dataset,
    SceneInstance,
    SynthSpec,
    generate_synthetic,
    load_dataset,
    pad_instance,
    save_dataset,
    softmax,
)
from .evaluate import (
    Energies,
    EvalReport,
    FeatureVector,
    brute_force_map,
    classify,
    evaluate,
    extract_features,
    feature_matrix,
    train_linear_classifier,
)
from .layers import (
    FactorActivations,
    OutParams,
    PhiParams,
    PsiParams,
    phi_backward,
    phi_forward,
    psi_backward,
    psi_forward,
)
from .model_io import ChecksumError, ModelFormatError, load_model, save_model
from .network import (
    NetworkParams,
    StepParams,
    StepTape,
    init_network_params,
    network_backward,
    network_forward,
    param_items,
    refined_probabilities,
    step_forward,
    zero_network_params,
)
from .training import (
    GradCheckReport,
    LossConfig,
    NumericError,
    TrainState,
    batch_loss,
    cross_entropy_loss,
    grad_check,
    sgd_update,
    train,
)

__all__ = [
    "ChecksumError",
    "ConfigError",
    "DataError",
    "Dataset",
    "Energies",
    "EvalReport",
    "FactorActivations",
    "FeatureVector",
    "GradCheckReport",
    "LabelSpaces",
    "LossConfig",
    "ModelConfig",
    "ModelFormatError",
    "NetworkParams",
    "NumericError",
    "OutParams",
    "PhiParams",
    "PsiParams",
    "SceneInstance",
    "StepParams",
    "StepTape",
    "SynthSpec",
    "Topology",
    "TrainState",
    "batch_loss",
    "brute_force_map",
    "build_topology",
    "classify",
    "cross_entropy_loss",
    "dimensions_fingerprint",
    "evaluate",
    "extract_features",
    "feature_matrix",
    "generate_synthetic",
    "grad_check",
    "init_network_params",
    "load_config",
    "load_dataset",
    "load_model",
    "network_backward",
    "network_forward",
    "pad_instance",
    "param_items",
    "parse_config_text",
    "phi_backward",
    "phi_forward",
    "psi_backward",
    "psi_forward",
    "refined_probabilities",
    "save_dataset",
    "save_model",
    "sgd_update",
    "softmax",
    "step_forward",
    "train",
    "train_linear_classifier",
    "validate_config",
    "zero_network_params",
]
