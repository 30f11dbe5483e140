"""Unsupervised few-shot embedding adaptation via early-stage feature
reconstruction with LID-based early stopping."""

from .adaptation import (
    AdaptedTask,
    EsfrConfig,
    EsfrError,
    MemberAbortError,
    TrainingTrace,
    adapt,
    adapt_semi,
    trace_probe,
    train_member,
    tune_lambda,
)
from .classifiers import (
    Prediction,
    Prototypes,
    bdcspn_classify,
    cspn_classify,
    linear_classify,
    nn_classify,
)
from .core import (
    EmbeddingSet,
    FewShotTask,
    ShiftTerm,
    compute_shift,
    cosine_distance,
    l2_normalize,
    preprocess_task,
)
from .harness import (
    DESK_PRESET,
    EpisodeSpec,
    EvalReport,
    SynthSpec,
    evaluate,
    generate_synthetic,
    load_embeddings,
    run_trace,
    sample_episode,
    save_embeddings,
)
from .lid import LidConfig, NeighborDistances, knn_distances, lid_mle, lid_summary, module_lid
from .recon import (
    AdamState,
    ArchSpec,
    DropoutMask,
    ReconModule,
    adam_step,
    backward,
    default_arch,
    forward,
    init_glorot,
    reconstruction_loss,
    semi_loss,
)

__all__ = [
    "AdaptedTask",
    "AdamState",
    "ArchSpec",
    "DESK_PRESET",
    "DropoutMask",
    "EmbeddingSet",
    "EpisodeSpec",
    "EsfrConfig",
    "EsfrError",
    "EvalReport",
    "FewShotTask",
    "LidConfig",
    "MemberAbortError",
    "NeighborDistances",
    "Prediction",
    "Prototypes",
    "ReconModule",
    "ShiftTerm",
    "SynthSpec",
    "TrainingTrace",
    "adam_step",
    "adapt",
    "adapt_semi",
    "backward",
    "bdcspn_classify",
    "compute_shift",
    "cosine_distance",
    "cspn_classify",
    "default_arch",
    "evaluate",
    "forward",
    "generate_synthetic",
    "init_glorot",
    "knn_distances",
    "l2_normalize",
    "lid_mle",
    "lid_summary",
    "linear_classify",
    "load_embeddings",
    "module_lid",
    "nn_classify",
    "preprocess_task",
    "reconstruction_loss",
    "run_trace",
    "sample_episode",
    "save_embeddings",
    "semi_loss",
    "trace_probe",
    "train_member",
    "tune_lambda",
]
