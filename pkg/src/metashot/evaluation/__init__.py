"""Few-shot evaluation, cross-shot testing, the CET metric and feature diagnostics."""

from metashot.evaluation.cet import CETReport, cet, cross_entropy, entropy, task_distribution
from metashot.evaluation.features import (
    FeatureStats,
    channel_mean,
    episode_features,
    feature_distances,
    heatmap,
    read_heatmap,
    save_heatmaps,
)
from metashot.evaluation.protocol import (
    SHOTS,
    AccuracyMatrix,
    EvalReport,
    ModelPredictor,
    OraclePredictor,
    cross_test,
    evaluate_model,
    evaluate_tasks,
    summarize,
    task_rng,
)

__all__ = [
    "AccuracyMatrix",
    "CETReport",
    "EvalReport",
    "FeatureStats",
    "ModelPredictor",
    "OraclePredictor",
    "SHOTS",
    "cet",
    "channel_mean",
    "cross_entropy",
    "cross_test",
    "entropy",
    "episode_features",
    "evaluate_model",
    "evaluate_tasks",
    "feature_distances",
    "heatmap",
    "read_heatmap",
    "save_heatmaps",
    "summarize",
    "task_distribution",
]
