"""U-Net style convolutional recurrent network producing a bounded
2-channel complex-spectrogram mask.

Encoder blocks are conv -> batch norm -> GLU with kernel (2, 4) and
stride (1, 2); a causal left-pad of one frame keeps the time axis fixed
while the frequency axis shrinks by conv arithmetic. A stacked
bidirectional LSTM processes the flattened bottleneck, and gated
transpose-conv decoder blocks with skip concatenation mirror the encoder
back to the input shape. Four tap points (A: input, B: middle encoder
output, C: recurrent output, D: pre-sigmoid logits) are exposed for
multimodal fusion.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

TAP_LOCATIONS = ("A", "B", "C", "D")


def conv_freq_out(f_in: int, kernel: int, stride: int) -> int:
    return (f_in - kernel) // stride + 1


@dataclass(frozen=True)
class CrnConfig:
    """Architecture hyperparameters.

    ``lstm_hidden=None`` means "same as the flattened bottleneck size",
    which for the default ladder is 98 channels x 3 bins = 294.
    """

    in_channels: int = 2
    freq_bins: int = 161
    enc_channels: tuple[int, ...] = (16, 32, 64, 76, 98)
    kernel: tuple[int, int] = (2, 4)
    stride: tuple[int, int] = (1, 2)
    lstm_layers: int = 4
    lstm_hidden: int | None = None
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    @property
    def dec_channels(self) -> tuple[int, ...]:
        return tuple(reversed(self.enc_channels[:-1])) + (self.in_channels,)

    @property
    def tap_b_index(self) -> int:
        """Encoder block whose output is tap B: the middle of the ladder."""
        return (len(self.enc_channels) + 1) // 2 - 1

    def freq_trace(self) -> tuple[int, ...]:
        """Frequency sizes entering each layer: (161, 79, 38, 18, 8, 3) by default."""
        trace = [self.freq_bins]
        for i in range(len(self.enc_channels)):
            f_in = trace[-1]
            if f_in < self.kernel[1]:
                raise ConfigError(
                    f"frequency collapses below kernel at encoder block {i}: {f_in}"
                )
            trace.append(conv_freq_out(f_in, self.kernel[1], self.stride[1]))
        return tuple(trace)

    @property
    def bottleneck_size(self) -> int:
        return self.enc_channels[-1] * self.freq_trace()[-1]

    @property
    def hidden_size(self) -> int:
        return self.bottleneck_size if self.lstm_hidden is None else self.lstm_hidden

    def validate(self) -> None:
        if self.in_channels < 1 or self.freq_bins < self.kernel[1]:
            raise ConfigError("invalid input dimensions")
        if len(self.enc_channels) < 2 or any(c < 1 for c in self.enc_channels):
            raise ConfigError("encoder ladder needs >= 2 positive channel counts")
        if self.kernel[0] < 1 or self.stride[0] != 1 or self.stride[1] < 1:
            raise ConfigError("unsupported kernel/stride configuration")
        if self.lstm_layers < 1 or self.hidden_size < 1:
            raise ConfigError("recurrent core needs positive sizes")
        self.freq_trace()


@dataclass(frozen=True)
class TapSet:
    """Feature maps recorded at the four fusion locations during a forward
    pass (post-fusion values when a hook ran)."""

    a: torch.Tensor
    b: torch.Tensor
    c: torch.Tensor
    d: torch.Tensor

    def get(self, location: str) -> torch.Tensor:
        return getattr(self, location.lower())

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {loc: tuple(self.get(loc).shape) for loc in TAP_LOCATIONS}


class EncoderBlock(nn.Module):
    """Causally padded strided conv, batch norm, GLU gating.

    The conv emits twice the stated output channels; GLU halves them back
    (value half gated by sigmoid of the gate half).
    """

    def __init__(self, c_in: int, c_out: int, cfg: CrnConfig):
        super().__init__()
        self.time_pad = cfg.kernel[0] - 1
        self.conv = nn.Conv2d(c_in, 2 * c_out, cfg.kernel, cfg.stride)
        self.bn = nn.BatchNorm2d(2 * c_out, eps=cfg.bn_eps, momentum=cfg.bn_momentum)

    def forward(self, x):
        if x.shape[1] != self.conv.in_channels:
            raise ShapeError(
                f"expected {self.conv.in_channels} channels, got {x.shape[1]}"
            )
        x = F.pad(x, (0, 0, self.time_pad, 0))
        return F.glu(self.bn(self.conv(x)), dim=1)


class DecoderBlock(nn.Module):
    """Skip concatenation, batch norm, gated transpose conv.

    ``freq_out_pad`` (0 or 1) is fixed at construction so the upsampled
    frequency size lands exactly on the mirrored encoder size; the extra
    trailing time frame produced by the kernel-2 transpose conv is cropped.
    """

    def __init__(self, c_in: int, c_out: int, freq_out_pad: int, cfg: CrnConfig):
        super().__init__()
        self.bn = nn.BatchNorm2d(2 * c_in, eps=cfg.bn_eps, momentum=cfg.bn_momentum)
        self.deconv = nn.ConvTranspose2d(
            2 * c_in, 2 * c_out, cfg.kernel, cfg.stride,
            output_padding=(0, freq_out_pad),
        )

    def forward(self, x, skip):
        if x.shape[0] != skip.shape[0] or x.shape[2:] != skip.shape[2:]:
            raise ShapeError(
                f"skip shape {tuple(skip.shape)} incompatible with {tuple(x.shape)}"
            )
        if x.shape[1] != skip.shape[1]:
            raise ShapeError(
                f"skip has {skip.shape[1]} channels, expected {x.shape[1]}"
            )
        y = torch.cat([x, skip], dim=1)
        y = self.deconv(self.bn(y))
        return F.glu(y[:, :, : y.shape[2] - 1, :], dim=1)


class RecurrentCore(nn.Module):
    """Stacked bLSTM over flattened (channels x freq) frames.

    Input (B, C, T, F) is reshaped to (B, T, C*F); the bidirectional
    output (2*hidden per step) is projected back down to C*F and reshaped.
    """

    def __init__(self, channels: int, freq: int, hidden: int, layers: int):
        super().__init__()
        self.channels = channels
        self.freq = freq
        self.lstm = nn.LSTM(
            channels * freq, hidden, num_layers=layers,
            batch_first=True, bidirectional=True,
        )
        self.proj = nn.Linear(2 * hidden, channels * freq)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.channels or x.shape[3] != self.freq:
            raise ShapeError(
                f"expected (B, {self.channels}, T, {self.freq}), got {tuple(x.shape)}"
            )
        b, c, t, f = x.shape
        y = x.permute(0, 2, 1, 3).reshape(b, t, c * f)
        y, _ = self.lstm(y)
        y = self.proj(y)
        return y.reshape(b, t, c, f).permute(0, 2, 1, 3)


class Crn(nn.Module):
    """Full mask estimator; ``forward`` returns (mask, taps).

    A ``fusion_hook`` callable, paired with ``fusion_location`` in
    {A, B, C, D}, transforms exactly one tap in place before downstream
    layers (including the skip path, for B) consume it.
    """

    def __init__(self, cfg: CrnConfig = CrnConfig()):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.freq_trace = cfg.freq_trace()
        self.tap_b_index = cfg.tap_b_index

        chans = (cfg.in_channels,) + cfg.enc_channels
        self.encoder = nn.ModuleList(
            EncoderBlock(chans[i], chans[i + 1], cfg) for i in range(len(cfg.enc_channels))
        )

        if cfg.enc_channels[-1] * self.freq_trace[-1] != cfg.bottleneck_size:
            raise ConfigError("bottleneck size inconsistent with frequency trace")
        self.core = RecurrentCore(
            cfg.enc_channels[-1], self.freq_trace[-1], cfg.hidden_size, cfg.lstm_layers
        )

        dec_in = tuple(reversed(cfg.enc_channels))
        blocks = []
        for i, c_out in enumerate(cfg.dec_channels):
            f_in = self.freq_trace[-1 - i]
            f_target = self.freq_trace[-2 - i]
            base = (f_in - 1) * cfg.stride[1] + cfg.kernel[1]
            out_pad = f_target - base
            if out_pad not in (0, 1):
                raise ConfigError(
                    f"decoder block {i} cannot reach frequency {f_target} from {f_in}"
                )
            blocks.append(DecoderBlock(dec_in[i], c_out, out_pad, cfg))
        self.decoder = nn.ModuleList(blocks)

    def forward(self, spec, fusion_hook=None, fusion_location: str | None = None):
        if fusion_hook is not None and fusion_location not in TAP_LOCATIONS:
            raise ShapeError(f"unknown fusion location {fusion_location!r}")
        if spec.dim() != 4 or spec.shape[1] != self.cfg.in_channels \
                or spec.shape[3] != self.cfg.freq_bins:
            raise ShapeError(
                f"expected (B, {self.cfg.in_channels}, T, {self.cfg.freq_bins}), "
                f"got {tuple(spec.shape)}"
            )

        x = spec
        if fusion_hook is not None and fusion_location == "A":
            x = fusion_hook(x)
        tap_a = x

        tap_b = None
        skips = []
        for i, block in enumerate(self.encoder):
            x = block(x)
            if i == self.tap_b_index:
                if fusion_hook is not None and fusion_location == "B":
                    x = fusion_hook(x)
                tap_b = x
            skips.append(x)

        x = self.core(x)
        if fusion_hook is not None and fusion_location == "C":
            x = fusion_hook(x)
        tap_c = x

        for i, block in enumerate(self.decoder):
            x = block(x, skips[len(skips) - 1 - i])

        if fusion_hook is not None and fusion_location == "D":
            x = fusion_hook(x)
        tap_d = x

        mask = torch.sigmoid(x)
        return mask, TapSet(a=tap_a, b=tap_b, c=tap_c, d=tap_d)

    def tap_shape(self, location: str) -> tuple[int, int]:
        """(channels, freq) of the feature map at a fusion location."""
        if location == "A" or location == "D":
            return self.cfg.in_channels, self.cfg.freq_bins
        if location == "B":
            i = self.tap_b_index
            return self.cfg.enc_channels[i], self.freq_trace[i + 1]
        if location == "C":
            return self.cfg.enc_channels[-1], self.freq_trace[-1]
        raise ConfigError(f"unknown fusion location {location!r}")
