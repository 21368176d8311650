"""AML / RAML / URAML network definitions and colour-space support."""

from metashot.netmodels.color import lab_planes, rgb_to_lab
from metashot.netmodels.configs import (
    AttentionConfig,
    BackboneConfig,
    HeadConfig,
    SplitBrainConfig,
    halved,
)
from metashot.netmodels.networks import (
    DropoutSampler,
    NetworkSpec,
    RepresentationHandle,
    area_matrix,
    area_resize,
    attention_forward,
    autoencoder_forward,
    autoencoder_inputs,
    backbone_forward,
    build_network,
    classifier_forward,
    decoder_forward,
    forward,
    pad_input,
    parameter_count,
    splitbrain_forward,
    splitbrain_targets,
)

__all__ = [
    "AttentionConfig",
    "BackboneConfig",
    "DropoutSampler",
    "HeadConfig",
    "NetworkSpec",
    "RepresentationHandle",
    "SplitBrainConfig",
    "area_matrix",
    "area_resize",
    "attention_forward",
    "autoencoder_forward",
    "autoencoder_inputs",
    "backbone_forward",
    "build_network",
    "classifier_forward",
    "decoder_forward",
    "forward",
    "halved",
    "lab_planes",
    "pad_input",
    "parameter_count",
    "rgb_to_lab",
    "splitbrain_forward",
    "splitbrain_targets",
]
