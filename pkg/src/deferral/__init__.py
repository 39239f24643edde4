"""Learning to defer to an expert: surrogate losses, Bayes oracles, expert
models, baselines and a coverage-constrained evaluation pipeline."""

from .core import (
    MISSING,
    DeferralDataset,
    Example,
    ExpertUnavailableError,
    InvalidInputError,
    ScoreVector,
    TrainingDivergedError,
    UndefinedMetricError,
    argmax_tiebreak,
    softmax_stable,
)
from .losses import (
    LossEval,
    eval_lce_alpha,
    eval_lce_cost_sensitive,
    eval_lmix,
    eval_loss_01,
    eval_lsh_binary,
)
from .optim import (
    DeferralModel,
    TrainConfig,
    grad_check,
    model_forward,
    predict_or_defer,
    select_alpha,
    temperature_scale,
    train_sgd,
)
from .bayes import (
    DistributionSpec,
    bayes_solution,
    cost_sensitive_argmin,
    lce_population_minimizer,
    lmix_population_rejector,
    verify_consistency,
)
from .experts import (
    ExpertBehaviorModel,
    ExpertSpec,
    evaluate_expert_model,
    expert_model_sample,
    expert_predict,
    fit_expert_model,
    impute_expert_agreement,
)
from .evaluation import (
    CoverageCurve,
    aupr,
    auroc,
    coverage_sweep,
    deferral_scores,
    learned_oracle_rejector,
    system_metrics,
)
from .data import (
    GaussianMixtureConfig,
    gen_gaussian_mixture,
    load_dataset_csv,
    mask_features,
    split_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "MISSING",
    "DeferralDataset",
    "Example",
    "ExpertUnavailableError",
    "InvalidInputError",
    "ScoreVector",
    "TrainingDivergedError",
    "UndefinedMetricError",
    "argmax_tiebreak",
    "softmax_stable",
    "LossEval",
    "eval_lce_alpha",
    "eval_lce_cost_sensitive",
    "eval_lmix",
    "eval_loss_01",
    "eval_lsh_binary",
    "DeferralModel",
    "TrainConfig",
    "grad_check",
    "model_forward",
    "predict_or_defer",
    "select_alpha",
    "temperature_scale",
    "train_sgd",
    "DistributionSpec",
    "bayes_solution",
    "cost_sensitive_argmin",
    "lce_population_minimizer",
    "lmix_population_rejector",
    "verify_consistency",
    "ExpertBehaviorModel",
    "ExpertSpec",
    "evaluate_expert_model",
    "expert_model_sample",
    "expert_predict",
    "fit_expert_model",
    "impute_expert_agreement",
    "CoverageCurve",
    "aupr",
    "auroc",
    "coverage_sweep",
    "deferral_scores",
    "learned_oracle_rejector",
    "system_metrics",
    "GaussianMixtureConfig",
    "gen_gaussian_mixture",
    "load_dataset_csv",
    "mask_features",
    "split_dataset",
]
