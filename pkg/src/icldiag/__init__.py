"""Fault diagnosis over tabular process data.

Feature extraction by internal contrastive learning (sub-vector pairs of a
single sample as positives/negatives), Mahalanobis outlier scoring with
empirical quantile thresholds, and two task pipelines: process monitoring
and open-set fault diagnosis with unknown-class rejection.
"""

from .classifier import ClassifierConfig, KnownClassifier, predict_known, train_classifier
from .data import (
    CsvSchema,
    FaultSpec,
    SplitSpec,
    Standardizer,
    SynthSpec,
    TabularDataset,
    fit_standardizer,
    load_csv,
    split,
    synth_generate,
    transform,
    write_csv,
)
from .errors import (
    ConfigError,
    IcldiagError,
    IngestionError,
    NumericalError,
    TrainingDivergenceError,
    UsageError,
)
from .icl import (
    IclConfig,
    IclModel,
    build_icl_model,
    internal_loss,
    score,
    similarity,
    slice_pairs,
    train_icl,
)
from .metrics import (
    DiagnosisReport,
    FdrResult,
    auroc,
    build_osfd_report,
    build_pm_report,
    build_report,
    f1_scores,
    fdr,
    write_scores_csv,
)
from .nn import (
    AdamState,
    DenseNet,
    adam_step,
    build_mlp,
    l2_normalize_rows,
    softmax_cross_entropy,
)
from .outlier import (
    GaussianStats,
    RejectionRule,
    alt_distance,
    classify_outlier,
    fit_gaussian,
    fit_rule,
    mahalanobis,
    quantile_threshold,
)
from .pca import PcaModel, fit_pca, spe_statistic, t2_statistic
from .pipelines import (
    OsfdModel,
    PmModel,
    osfd_fit,
    osfd_predict,
    osfd_predict_detail,
    pm_detect,
    pm_fit,
    load_osfd_model,
    load_pm_model,
    save_osfd_model,
    save_pm_model,
)

__version__ = "0.1.0"
