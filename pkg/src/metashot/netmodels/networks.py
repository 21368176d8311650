"""Network construction and forward passes.

Parameter names carry their module as a prefix: ``f`` feature extractor,
``a`` attention model, ``c`` classifier, ``r`` representation encoder, ``au``
auxiliary head, ``l``/``ab`` Split-Brain encoders and ``dl``/``dab``/``dr``
their decoders.  Feature maps are (batch, height, width, channels).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from metashot.diffcore import ParamSet, Tensor, no_grad, ops, scope
from metashot.errors import ConfigError, ShapeError
from metashot.netmodels.color import lab_planes, rgb_to_lab
from metashot.netmodels.configs import (
    AttentionConfig,
    BackboneConfig,
    HeadConfig,
    SplitBrainConfig,
    halved,
)

VARIANTS = ("aml", "aml_minus_attention", "raml_abp")


@dataclass(frozen=True)
class NetworkSpec:
    """Everything needed to build and run one meta-learner network."""

    variant: str = "aml"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    attention: AttentionConfig | None = None
    # input width of the ABP module (raml_abp only)
    feature_dim: int = 256

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown network variant {self.variant!r}")
        self.head.validate()
        if self.variant == "raml_abp":
            if self.feature_dim < 1:
                raise ConfigError("feature_dim must be >= 1")
        else:
            self.backbone.validate()
        att = self.attention_config()
        if att.channels != self.feature_channels():
            raise ConfigError(
                f"attention channels {att.channels} != feature channels {self.feature_channels()}"
            )
        return self

    def feature_channels(self):
        if self.variant == "raml_abp":
            return self.feature_dim
        return self.backbone.final_channels

    def attention_config(self):
        if self.attention is None:
            return AttentionConfig(channels=self.feature_channels())
        return self.attention

    def classifier_inputs(self):
        if self.variant == "raml_abp":
            return self.feature_dim
        h, w, c = self.backbone.output_shape()
        return h * w * c


class DropoutSampler:
    """Draws inverted-dropout masks from a numpy Generator."""

    def __init__(self, rng, rate):
        self.rng = rng
        self.rate = float(rate)

    def mask(self, shape):
        keep = self.rng.random(shape) >= self.rate
        return keep / (1.0 - self.rate)


def _dropout(h, dropout):
    if dropout is None or dropout.rate <= 0:
        return h
    return ops.dropout(h, dropout.mask(h.shape))


# ---------------------------------------------------------------- initialization


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _lecun(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(1.0 / fan_in)


def _init_backbone(rng, prefix, cfg, in_channels):
    out = []
    cin = in_channels
    k = cfg.kernel
    for i, cout in enumerate(cfg.widths(), start=1):
        out.append((f"{prefix}.conv{i}.w", _he(rng, (k, k, cin, cout), k * k * cin)))
        out.append((f"{prefix}.conv{i}.b", np.zeros(cout)))
        out.append((f"{prefix}.bn{i}.gamma", np.ones(cout)))
        out.append((f"{prefix}.bn{i}.beta", np.zeros(cout)))
        cin = cout
    return out


def _init_conv1x1(rng, prefix, channels, bias):
    out = [(f"{prefix}.w", _lecun(rng, (1, 1, channels, channels), channels))]
    if bias:
        out.append((f"{prefix}.b", np.zeros(channels)))
    return out


def _init_head(rng, prefix, d_in, head):
    if head.fc_layers == 1:
        return [
            (f"{prefix}.fc1.w", _lecun(rng, (d_in, head.ways), d_in)),
            (f"{prefix}.fc1.b", np.zeros(head.ways)),
        ]
    return [
        (f"{prefix}.fc1.w", _he(rng, (d_in, head.hidden), d_in)),
        (f"{prefix}.fc1.b", np.zeros(head.hidden)),
        (f"{prefix}.fc2.w", _lecun(rng, (head.hidden, head.ways), head.hidden)),
        (f"{prefix}.fc2.b", np.zeros(head.ways)),
    ]


def _init_decoder(rng, prefix, sb, in_channels, out_channels):
    w1, w2, w3 = sb.decoder_widths
    k0, k1, k2, k3 = sb.decoder_kernels
    layers = [
        ("conv1", k0, in_channels, w1),
        ("deconv1", k1, w1, w2),
        ("deconv2", k2, w2, w3),
        ("out", k3, w3, out_channels),
    ]
    out = []
    for name, k, cin, cout in layers:
        out.append((f"{prefix}.{name}.w", _he(rng, (k, k, cin, cout), k * k * cin)))
        out.append((f"{prefix}.{name}.b", np.zeros(cout)))
    return out


def build_network(kind, config, seed):
    """Initialize the ParamSet for one network kind.

    kind is one of ``aml``, ``aml_minus_attention``, ``abp`` (NetworkSpec
    config); ``representation`` (BackboneConfig); ``aux_head`` (a
    ``(feature_dim, classes)`` pair); ``splitbrain`` or ``autoencoder``
    (SplitBrainConfig).
    """
    rng = np.random.default_rng(seed)
    if kind in ("aml", "aml_minus_attention", "abp"):
        spec = config
        expected = "raml_abp" if kind == "abp" else kind
        if spec.variant != expected:
            raise ConfigError(f"network kind {kind!r} needs variant {expected!r}, got {spec.variant!r}")
        spec.validate()
        entries = []
        if kind != "abp":
            entries += _init_backbone(rng, "f", spec.backbone, spec.backbone.input_resolution[2])
        att = spec.attention_config()
        proj = "f.proj" if kind == "aml_minus_attention" else "a"
        entries += _init_conv1x1(rng, proj, att.channels, att.bias)
        entries += _init_head(rng, "c", spec.classifier_inputs(), spec.head)
        return ParamSet(entries)
    if kind == "representation":
        cfg = config.validate()
        return ParamSet(_init_backbone(rng, "r", cfg, cfg.input_resolution[2]))
    if kind == "aux_head":
        d_in, classes = config
        if classes < 2:
            raise ConfigError("auxiliary head needs at least 2 classes")
        return ParamSet(_init_head(rng, "au", d_in, HeadConfig(fc_layers=1, ways=classes)))
    if kind == "splitbrain":
        sb = config.validate()
        enc = halved(sb.encoder)
        entries = _init_backbone(rng, "l", enc, 1)
        entries += _init_backbone(rng, "ab", enc, 2)
        entries += _init_decoder(rng, "dl", sb, enc.final_channels, 2)
        entries += _init_decoder(rng, "dab", sb, enc.final_channels, 1)
        return ParamSet(entries)
    if kind == "autoencoder":
        sb = config.validate()
        c = sb.encoder.input_resolution[2]
        entries = _init_backbone(rng, "r", sb.encoder, c)
        entries += _init_decoder(rng, "dr", sb, sb.encoder.final_channels, c)
        return ParamSet(entries)
    raise ConfigError(f"unknown network kind {kind!r}")


# ---------------------------------------------------------------- forward pieces


def pad_input(x, cfg):
    """Zero-pad images (centered) to the backbone's padded resolution."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError("input", f"expected (b, h, w, c) images, got shape {x.shape}")
    if x.shape[3] != cfg.input_resolution[2]:
        raise ShapeError(
            "input", f"images have {x.shape[3]} channels, network expects {cfg.input_resolution[2]}"
        )
    H, W = cfg.padded_resolution()
    h, w = x.shape[1:3]
    if h > H or w > W:
        raise ShapeError("input", f"image {h}x{w} larger than configured {cfg.input_resolution[:2]}")
    top, left = (H - h) // 2, (W - w) // 2
    if (h, w) == (H, W):
        return x
    return np.pad(x, ((0, 0), (top, H - h - top), (left, W - w - left), (0, 0)))


def backbone_forward(x, params, prefix, cfg):
    h = x if isinstance(x, Tensor) else Tensor(pad_input(x, cfg))
    for i in range(1, cfg.conv_blocks + 1):
        with scope(f"{prefix}.block{i}"):
            h = ops.add(ops.conv2d(h, params[f"{prefix}.conv{i}.w"]), params[f"{prefix}.conv{i}.b"])
            gamma, beta = params[f"{prefix}.bn{i}.gamma"], params[f"{prefix}.bn{i}.beta"]
            if cfg.bn_before_relu:
                h = ops.relu(ops.batch_norm(h, gamma, beta))
            else:
                h = ops.batch_norm(ops.relu(h), gamma, beta)
            h = ops.max_pool2(h)
    return h


def _conv1x1(x, params, prefix):
    w = params[f"{prefix}.w"]
    if w.shape[2] != x.shape[3]:
        raise ShapeError(prefix, f"feature map has {x.shape[3]} channels, weights expect {w.shape[2]}")
    y = ops.conv2d(x, w)
    if f"{prefix}.b" in params:
        y = ops.add(y, params[f"{prefix}.b"])
    return y


def attention_forward(gamma, params, prefix="a", mask_override=None):
    """Soft channel attention: m = sigmoid(conv1x1(P_a(gamma))), gamma_alpha = gamma * m.

    Returns ``(m, gamma_alpha)`` with m shaped (b, 1, 1, c). ``mask_override``
    replaces m (e.g. all-ones to bypass attention).
    """
    gamma = gamma if isinstance(gamma, Tensor) else Tensor(gamma)
    with scope(prefix):
        if mask_override is not None:
            m = Tensor(mask_override)
        else:
            pooled = ops.global_avg_pool(gamma)
            m = ops.sigmoid(_conv1x1(pooled, params, prefix))
        return m, ops.mul(gamma, m)


def classifier_forward(h, params, prefix, fc_layers, dropout=None):
    with scope(prefix):
        h = _dropout(h, dropout)
        h = ops.add(ops.matmul(h, params[f"{prefix}.fc1.w"]), params[f"{prefix}.fc1.b"])
        if fc_layers == 2:
            h = _dropout(ops.relu(h), dropout)
            h = ops.add(ops.matmul(h, params[f"{prefix}.fc2.w"]), params[f"{prefix}.fc2.b"])
        return h


def forward(x, params, spec, dropout=None, representation=None, return_features=False):
    """Logits (b, ways) of the meta-learner network.

    For ``aml`` and ``aml_minus_attention`` x is an image batch. For
    ``raml_abp`` x is either an image batch encoded through ``representation``
    or, when no representation is given, precomputed (b, feature_dim)
    features.
    """
    variant = spec.variant
    if variant not in VARIANTS:
        raise ConfigError(f"unknown network variant {variant!r}")
    has_att = "a.w" in params
    has_proj = "f.proj.w" in params
    if variant == "aml" and not has_att or variant == "aml_minus_attention" and not has_proj:
        raise ConfigError(f"parameters do not match variant {variant!r}")
    if variant == "raml_abp" and ("f.conv1.w" in params or not has_att):
        raise ConfigError("raml_abp parameters must hold only the ABP module")
    m = None
    if variant == "raml_abp":
        if representation is not None:
            _, feats = representation.encode(x)
        else:
            feats = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != spec.feature_dim:
            raise ShapeError("abp.input", f"expected (b, {spec.feature_dim}) features, got {feats.shape}")
        gamma = Tensor(feats.reshape(feats.shape[0], 1, 1, -1))
        m, gamma_alpha = attention_forward(gamma, params, "a")
    else:
        gamma = backbone_forward(x, params, "f", spec.backbone)
        if variant == "aml":
            m, gamma_alpha = attention_forward(gamma, params, "a")
        else:
            with scope("f.proj"):
                gamma_alpha = _conv1x1(gamma, params, "f.proj")
    logits = classifier_forward(ops.flatten(gamma_alpha), params, "c", spec.head.fc_layers, dropout)
    if return_features:
        return logits, {"gamma": gamma, "gamma_alpha": gamma_alpha, "mask": m}
    return logits


def parameter_count(params):
    return params.numel()


# ---------------------------------------------------------------- decoders / Split-Brain


def area_matrix(n_in, n_out):
    """(n_out, n_in) area-averaging interpolation weights; rows sum to 1."""
    scale = n_in / n_out
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), min(n_in, int(np.ceil(hi)))):
            m[i, j] = max(0.0, min(hi, j + 1) - max(lo, j)) / scale
    return m


def area_resize(images, size):
    """Area-average numpy images (b, h, w, c) to (b, size, size, c)."""
    images = np.asarray(images, dtype=np.float64)
    rows = area_matrix(images.shape[1], size)
    cols = area_matrix(images.shape[2], size)
    return np.einsum("hH,bHWc,wW->bhwc", rows, images, cols)


def decoder_forward(gamma_map, params, prefix, sb):
    with scope(prefix):
        h = ops.relu(_conv(gamma_map, params, f"{prefix}.conv1"))
        h = ops.relu(_conv(ops.upsample2(h), params, f"{prefix}.deconv1"))
        h = ops.relu(_conv(ops.upsample2(h), params, f"{prefix}.deconv2"))
        h = _conv(h, params, f"{prefix}.out")
        t = sb.target_resolution
        return ops.resize(h, area_matrix(h.shape[1], t), area_matrix(h.shape[2], t))


def _conv(x, params, name):
    return ops.add(ops.conv2d(x, params[f"{name}.w"]), params[f"{name}.b"])


def branch_encoders(encoder):
    """Half-width encoder configs for the 1-channel L and 2-channel ab branches."""
    enc = halved(encoder)
    hw = enc.input_resolution[:2]
    return enc.with_input(hw + (1,)), enc.with_input(hw + (2,))


def splitbrain_forward(x_l, x_ab, params, sb):
    """Cross-channel prediction: L -> ab and ab -> L.

    Returns ``(ab_hat, l_hat, gamma_l, gamma_ab)``; the reconstructions are at
    the target resolution (11x11 by default).
    """
    x_l = np.asarray(x_l, dtype=np.float64)
    x_ab = np.asarray(x_ab, dtype=np.float64)
    if x_l.ndim != 4 or x_l.shape[3] != 1:
        raise ShapeError("splitbrain.input", f"L input must have 1 channel, got shape {x_l.shape}")
    if x_ab.ndim != 4 or x_ab.shape[3] != 2:
        raise ShapeError("splitbrain.input", f"ab input must have 2 channels, got shape {x_ab.shape}")
    if x_l.shape[:3] != x_ab.shape[:3]:
        raise ShapeError("splitbrain.input", f"L {x_l.shape} and ab {x_ab.shape} differ in size")
    enc_l, enc_ab = branch_encoders(sb.encoder)
    gamma_l = backbone_forward(x_l, params, "l", enc_l)
    gamma_ab = backbone_forward(x_ab, params, "ab", enc_ab)
    ab_hat = decoder_forward(gamma_l, params, "dl", sb)
    l_hat = decoder_forward(gamma_ab, params, "dab", sb)
    return ab_hat, l_hat, gamma_l, gamma_ab


def splitbrain_targets(images, size=11):
    """Area-downsampled (ab/128, L/100) reconstruction targets of RGB images."""
    l, ab = lab_planes(images)
    return area_resize(ab, size), area_resize(l, size)


def autoencoder_inputs(images):
    """Normalized autoencoder input: Lab/(100,128,128) for colour, raw for grayscale."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[-1] == 3:
        return rgb_to_lab(images) / np.array([100.0, 128.0, 128.0])
    return images


def autoencoder_forward(x, params, sb):
    gamma = backbone_forward(x, params, "r", sb.encoder)
    return decoder_forward(gamma, params, "dr", sb), gamma


# ---------------------------------------------------------------- representation


class RepresentationHandle:
    """A frozen, pretrained encoder supplying features to the ABP module.

    Weights are copied and marked read-only on construction.
    """

    MODES = ("supervised", "splitbrain", "autoencoder")

    def __init__(self, mode, params, encoder):
        if mode not in self.MODES:
            raise ConfigError(f"unknown representation mode {mode!r}")
        self.mode = mode
        self.encoder = encoder
        frozen = []
        for name, t in params.items():
            a = np.array(t.data, dtype=np.float64, copy=True)
            a.setflags(write=False)
            frozen.append((name, Tensor(a)))
        self.params = ParamSet(frozen)

    @property
    def feature_dim(self):
        if self.mode == "splitbrain":
            return 2 * halved(self.encoder).final_channels
        return self.encoder.final_channels

    def encode(self, images):
        """Return ``(feature_maps, pooled)`` numpy arrays for an image batch."""
        images = np.asarray(images, dtype=np.float64)
        with no_grad():
            if self.mode == "splitbrain":
                if images.shape[-1] != 3:
                    raise ShapeError("representation", "Split-Brain encoders need RGB images")
                l, ab = lab_planes(images)
                enc_l, enc_ab = branch_encoders(self.encoder)
                gl = backbone_forward(l, self.params, "l", enc_l)
                gab = backbone_forward(ab, self.params, "ab", enc_ab)
                maps = ops.concat([gl, gab], axis=3)
            elif self.mode == "autoencoder":
                maps = backbone_forward(autoencoder_inputs(images), self.params, "r", self.encoder)
            else:
                maps = backbone_forward(images, self.params, "r", self.encoder)
            pooled = ops.global_avg_pool(maps)
        return maps.data, pooled.data.reshape(images.shape[0], -1)
