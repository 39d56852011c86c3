"""Interpretable deep factorization machines for multiclass tabular data.

The package combines per-feature embeddings, a factorization-machine head
with per-class pairwise interaction scores, and an MLP head over the shared
embeddings.  It ships the full evaluation protocol (balanced patient-level
folds, longitudinal training expansion, random hyperparameter search), two
interpretability reports (linear feature importances and per-class pairwise
interaction importances), and a synthetic cohort generator with planted
effects so every statistical claim is testable against ground truth.
"""

__version__ = "0.1.0"

from .errors import (
    TabfmError,
    SchemaError,
    DatasetError,
    ShapeError,
    CheckpointError,
    TrainingDivergedError,
    NumericalError,
    FoldBalanceError,
    LeakageError,
    SearchError,
    CohortSpecError,
)
from .data import (
    FeatureSpec,
    FeatureSchema,
    Sample,
    Standardizer,
    load_schema,
    save_schema,
    group_features,
    load_dataset,
    save_dataset,
    remap_samples,
    fit_standardizer,
    identity_standardizer,
    encode,
    encode_dataset,
    feature_scalars,
)
from .embeddings import (
    EmbeddingBank,
    init_embeddings,
    embed,
    embed_batch,
    embed_jacobians,
    embed_jacobians_batch,
)
from .fm import (
    FMHead,
    init_fm_head,
    interaction_features,
    fm_forward,
    fm_forward_batch,
    fm_pair_contribution,
    pair_contribution_matrix,
    fm_backward,
    fm_backward_batch,
)
from .mlp import (
    MLPHead,
    init_mlp_head,
    mlp_forward,
    mlp_forward_batch,
    mlp_backward,
    mlp_backward_batch,
)
from .model import (
    VARIANTS,
    TrainConfig,
    EpochStats,
    DeepFMModel,
    LinearInteractionModel,
    init_model,
    named_parameters,
    predict_proba,
    predict_proba_batch,
    predict_classes,
    deep_scores_batch,
    loss,
    loss_gradients,
    train,
    train_arrays,
    fit_linear_interactions,
    fit_linear_arrays,
    expand_pairs,
    expanded_width,
    save_checkpoint,
    load_checkpoint,
    write_training_log,
)
from .harness import (
    BENCHMARK_VARIANTS,
    ALL_VARIANTS,
    FoldPlan,
    FoldData,
    SearchSpace,
    TrialResult,
    FoldOutcome,
    EvalReport,
    make_folds,
    expand_training,
    balanced_accuracy,
    prepare_fold,
    hyperparameter_search,
    run_benchmark,
    write_eval_report,
    write_trial_log,
)
from .interpret import (
    ImportanceEntry,
    ImportanceReport,
    InteractionEntry,
    InteractionReport,
    linear_importance,
    interaction_importance,
    meta_interaction_importance,
    interaction_report,
    pair_names,
    write_importance_report,
    write_interaction_report,
    write_report_summary,
)
from .synth import (
    REFERENCE_PRIORS,
    REFERENCE_PATIENTS,
    REFERENCE_MEAN_VISITS,
    REFERENCE_CSF_MISSING,
    SchemaTemplate,
    CohortSpec,
    GroundTruth,
    build_schema,
    meta_groups,
    meta_schema_for,
    generate,
    describe,
    volume_names,
    load_cohort_spec,
    write_cohort,
)
from .cli import main
