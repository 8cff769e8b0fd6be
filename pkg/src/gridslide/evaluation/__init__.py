"""Downstream evaluation protocols and metrics."""
from gridslide.evaluation.classifiers import (
    DEFAULT_L2,
    L2_GRID,
    LabeledEmbeddings,
    LogisticModel,
    ProbeResult,
    center_normalize,
    classification_metrics,
    knn_predict,
    linear_probe,
    logistic_fit,
    logistic_objective,
    simpleshot,
)
from gridslide.evaluation.fewshot import N_RUNS, SHOTS, FewShotResult, few_shot_protocol, sample_support
from gridslide.evaluation.metrics import (
    auroc,
    auroc_ovr,
    balanced_accuracy,
    bleu1,
    confusion_matrix,
    kappa_quadratic,
    meteor_lite,
    rouge1,
    weighted_f1,
)
from gridslide.evaluation.stats import N_BOOTSTRAP, BootstrapResult, EvalReport, bootstrap_ci
from gridslide.evaluation.survival import (
    ALPHA_GRID,
    SurvivalResult,
    c_index,
    cox_fit,
    cox_objective,
    site_preserved_folds,
    survival_eval,
)
from gridslide.evaluation.zeroshot import TEMPLATES, PromptEnsemble, zero_shot, zero_shot_scores
