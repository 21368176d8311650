from __future__ import annotations

from dataclasses import dataclass

from metashot.errors import ConfigError


@dataclass(frozen=True)
class InnerLoopConfig:
    steps: int = 1
    alpha_init: float = 0.01
    alpha_trainable: bool = True
    # "all" adapts every meta-learner weight; "abp_only" adapts attention + classifier
    scope: str = "all"
    dropout_in_inner: bool = True

    def validate(self):
        if self.steps < 1:
            raise ConfigError(f"inner steps must be >= 1, got {self.steps}")
        if self.scope not in ("all", "abp_only"):
            raise ConfigError(f"inner scope must be 'all' or 'abp_only', got {self.scope!r}")
        return self


@dataclass(frozen=True)
class MetaConfig:
    beta: float = 0.001
    beta_final: float = 0.0001
    decay_after: int = 30000
    meta_batch: int = 4
    iterations: int = 60000
    second_order: bool = True
    dropout_rate: float = 0.2
    l1: float = 0.001
    l2: float = 0.00001

    def validate(self):
        if self.beta < 0 or self.beta_final < 0:
            raise ConfigError("meta learning rates must be >= 0")
        if self.meta_batch < 1:
            raise ConfigError(f"meta_batch must be >= 1, got {self.meta_batch}")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.l1 < 0 or self.l2 < 0:
            raise ConfigError("regularization coefficients must be >= 0")
        return self

    def beta_at(self, iteration):
        return self.beta if iteration < self.decay_after else self.beta_final


@dataclass(frozen=True)
class PretrainConfig:
    objective: str = "supervised"
    batch_size: int = 256
    lr: float = 0.001
    lr_final: float = 0.0001
    decay_after: int = 30000
    l2: float = 0.00001
    dropout_rate: float = 0.2
    iterations: int = 60000
    optimizer: str = "adam"

    def validate(self):
        if self.objective not in ("supervised", "splitbrain", "autoencoder"):
            raise ConfigError(f"unknown pretraining objective {self.objective!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        return self

    def lr_at(self, iteration):
        return self.lr if iteration < self.decay_after else self.lr_final
