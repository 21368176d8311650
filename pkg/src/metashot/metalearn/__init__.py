"""Meta-training engines (AML, RAML/URAML) and the pretraining stage."""

from metashot.metalearn.configs import InnerLoopConfig, MetaConfig, PretrainConfig
from metashot.metalearn.engine import (
    METRIC_FIELDS,
    MetaLearner,
    StepStats,
    TrainState,
    adapt_and_predict,
    apply_regularization,
    draw_batch,
    init_alpha,
    init_state,
    inner_update,
    meta_gradient,
    meta_step,
    meta_train,
    weight_names,
)
from metashot.metalearn.pretrain import (
    PRETRAIN_FIELDS,
    Adam,
    init_pretrain_params,
    pretrain,
    pretrain_loss,
    training_accuracy,
)

__all__ = [
    "Adam",
    "InnerLoopConfig",
    "METRIC_FIELDS",
    "MetaConfig",
    "MetaLearner",
    "PRETRAIN_FIELDS",
    "PretrainConfig",
    "StepStats",
    "TrainState",
    "adapt_and_predict",
    "apply_regularization",
    "draw_batch",
    "init_alpha",
    "init_pretrain_params",
    "init_state",
    "inner_update",
    "meta_gradient",
    "meta_step",
    "meta_train",
    "pretrain",
    "pretrain_loss",
    "training_accuracy",
    "weight_names",
]
