"""Configuration records for every network the engine builds."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from metashot.errors import ConfigError


@dataclass(frozen=True)
class BackboneConfig:
    """Stack of conv 3x3 -> batch-norm -> ReLU -> 2x2 max-pool blocks."""

    conv_blocks: int = 4
    channels_per_block: int = 64
    input_resolution: tuple = (28, 28, 1)
    kernel: int = 3
    bn_before_relu: bool = True
    # width of the last block; None keeps channels_per_block
    out_channels: int | None = None

    def validate(self):
        if self.conv_blocks < 1:
            raise ConfigError(f"conv_blocks must be >= 1, got {self.conv_blocks}")
        if self.channels_per_block < 1:
            raise ConfigError(f"channels_per_block must be >= 1, got {self.channels_per_block}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be a positive odd size, got {self.kernel}")
        if len(self.input_resolution) != 3 or min(self.input_resolution) < 1:
            raise ConfigError(f"input_resolution must be (h, w, c), got {self.input_resolution}")
        if self.out_channels is not None and self.out_channels < 1:
            raise ConfigError(f"out_channels must be >= 1, got {self.out_channels}")
        return self

    @property
    def final_channels(self):
        return self.out_channels or self.channels_per_block

    def widths(self):
        w = [self.channels_per_block] * self.conv_blocks
        w[-1] = self.final_channels
        return w

    def padded_resolution(self):
        """Input height/width zero-padded up to a multiple of 2**conv_blocks."""
        m = 2**self.conv_blocks
        h, w = self.input_resolution[:2]
        return -(-h // m) * m, -(-w // m) * m

    def output_shape(self):
        h, w = self.padded_resolution()
        m = 2**self.conv_blocks
        return h // m, w // m, self.final_channels

    def with_input(self, resolution):
        return replace(self, input_resolution=tuple(resolution))


@dataclass(frozen=True)
class AttentionConfig:
    channels: int = 64
    bias: bool = True


@dataclass(frozen=True)
class HeadConfig:
    fc_layers: int = 1
    ways: int = 5
    hidden: int = 128

    def validate(self):
        if self.fc_layers not in (1, 2):
            raise ConfigError(f"fc_layers must be 1 or 2, got {self.fc_layers}")
        if self.ways < 2:
            raise ConfigError(f"ways must be >= 2, got {self.ways}")
        if self.hidden < 1:
            raise ConfigError(f"hidden must be >= 1, got {self.hidden}")
        return self


@dataclass(frozen=True)
class SplitBrainConfig:
    """Two half-width encoders (L -> ab, ab -> L) with deconvolution decoders."""

    encoder: BackboneConfig = field(default_factory=BackboneConfig)
    decoder_widths: tuple = (1024, 512, 256)
    decoder_kernels: tuple = (5, 3, 3, 1)
    target_resolution: int = 11

    def validate(self):
        self.encoder.validate()
        if len(self.decoder_widths) != 3 or min(self.decoder_widths) < 1:
            raise ConfigError(f"decoder_widths must list three positive widths, got {self.decoder_widths}")
        if len(self.decoder_kernels) != 4 or any(k % 2 == 0 for k in self.decoder_kernels):
            raise ConfigError(f"decoder_kernels must list four odd sizes, got {self.decoder_kernels}")
        if self.target_resolution < 1:
            raise ConfigError("target_resolution must be >= 1")
        return self


def halved(backbone):
    """The per-branch Split-Brain encoder: every filter count halved."""
    out = backbone.out_channels
    return replace(
        backbone,
        channels_per_block=max(1, backbone.channels_per_block // 2),
        out_channels=None if out is None else max(1, out // 2),
    )
