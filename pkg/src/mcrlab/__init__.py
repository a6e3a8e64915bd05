"""Training laboratory for studying modality competition in multimodal
classifiers: a small float64 autodiff core, influence losses built on
prediction-divergence under latent perturbations, game-theoretic gradient
routing between modality encoders, synthetic data with controllable shared
and unique information, exact discrete mutual-information oracles, and a
reproducible experiment CLI."""

from .autodiff import GradientNanError, ParamGroup, Tensor, gradients
from .game import STRATEGIES, importance_scores, route_mipd_gradients, strategy_matrix
from .losses import (
    LossReport,
    McrConfig,
    ceb_loss,
    cross_entropy,
    jsd,
    mipd_loss,
    supervised_contrastive,
)
from .models import ModelConfig, MultimodalModel, build_model, load_checkpoint, save_checkpoint
from .perturb import CostCounter, apply_perturbation, sample_permutations
from .synthdata import (
    DiscreteJoint,
    SyntheticSpec,
    contrastive_bound_slack,
    generate,
    load_dataset,
    mi_all,
    mi_oracle,
    random_joint,
    save_dataset,
)
from .trainer import (
    ArchConfig,
    DiagConfig,
    EnsembleModel,
    EpochRecord,
    OptimConfig,
    RunConfig,
    TrainResult,
    ensemble_predict,
    error_matrix,
    linear_probe,
    mce_estimate,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "CostCounter",
    "DiagConfig",
    "DiscreteJoint",
    "EnsembleModel",
    "EpochRecord",
    "GradientNanError",
    "LossReport",
    "McrConfig",
    "ModelConfig",
    "MultimodalModel",
    "OptimConfig",
    "ParamGroup",
    "RunConfig",
    "STRATEGIES",
    "SyntheticSpec",
    "Tensor",
    "TrainResult",
    "apply_perturbation",
    "build_model",
    "ceb_loss",
    "contrastive_bound_slack",
    "cross_entropy",
    "ensemble_predict",
    "error_matrix",
    "generate",
    "gradients",
    "importance_scores",
    "jsd",
    "linear_probe",
    "load_checkpoint",
    "load_dataset",
    "mce_estimate",
    "mi_all",
    "mi_oracle",
    "mipd_loss",
    "random_joint",
    "route_mipd_gradients",
    "sample_permutations",
    "save_checkpoint",
    "save_dataset",
    "strategy_matrix",
    "supervised_contrastive",
    "train",
]
