"""Multimodal alignment and fusion.

Visual frame states are aligned to the audio frame rate either by
deterministic index upsampling or by learned multi-head temporal
attention, projected to a single-channel map matching the audio feature
map's frequency size, and combined by addition or concatenation at one of
the four tap locations.

The combine layer (1x1 conv) is constructed transparent: additive fusion
starts at zero and concatenative fusion starts as a pass-through of the
audio channels, so a freshly fused network reproduces the audio-only
network output exactly. The projection and attention layers keep their
random init; zeroing them too would kill the gradient into the combine
layer and freeze the visual path permanently.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InvalidInput, ShapeError

LOCATIONS = ("A", "B", "C", "D")
ALIGNMENTS = ("upsample", "attention")
METHODS = ("add", "concat")


@dataclass(frozen=True)
class FusionConfig:
    location: str = "C"
    align: str = "upsample"
    method: str = "add"
    attention_heads: int = 4
    attention_dim: int = 128

    def __post_init__(self):
        if self.location not in LOCATIONS:
            raise ConfigError(f"location must be one of {LOCATIONS}, got {self.location!r}")
        if self.align not in ALIGNMENTS:
            raise ConfigError(f"align must be one of {ALIGNMENTS}, got {self.align!r}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.attention_heads < 1 or self.attention_dim < 1:
            raise ConfigError("attention sizes must be positive")
        if self.attention_dim % self.attention_heads != 0:
            raise ConfigError(
                f"heads {self.attention_heads} must divide model dim {self.attention_dim}"
            )

    def label(self) -> str:
        return f"{self.location}/{self.align}/{self.method}"


def upsample_align(states: torch.Tensor, t_audio: int) -> torch.Tensor:
    """Nearest-past-frame upsampling: ``out[t] = states[floor(t * T_v / t_audio)]``.

    The index map is monotone non-decreasing and hits every source frame
    when T_v <= t_audio.
    """
    if t_audio <= 0:
        raise InvalidInput("t_audio must be positive")
    t_v = states.shape[-2]
    idx = torch.arange(t_audio, device=states.device) * t_v // t_audio
    return states.index_select(-2, idx)


class TemporalAttention(nn.Module):
    """Multi-head scaled dot-product attention from audio-frame queries
    onto visual-frame keys/values."""

    def __init__(self, query_dim: int, state_dim: int, model_dim: int = 128,
                 heads: int = 4):
        super().__init__()
        if model_dim % heads != 0:
            raise ConfigError(f"heads {heads} must divide model dim {model_dim}")
        self.heads = heads
        self.head_dim = model_dim // heads
        self.q_proj = nn.Linear(query_dim, model_dim)
        self.k_proj = nn.Linear(state_dim, model_dim)
        self.v_proj = nn.Linear(state_dim, model_dim)
        self.out_proj = nn.Linear(model_dim, model_dim)

    def forward(self, queries, states):
        """(B, T_a, Dq), (B, T_v, Ds) -> aligned (B, T_a, model_dim) and
        attention weights (B, heads, T_a, T_v)."""
        if queries.dim() != 3 or states.dim() != 3:
            raise ShapeError("queries and states must be 3-D (batch, time, dim)")
        if queries.shape[0] != states.shape[0]:
            raise ShapeError("batch mismatch between queries and states")
        b, t_a, _ = queries.shape
        t_v = states.shape[1]

        def split(x, t):
            return x.reshape(b, t, self.heads, self.head_dim).transpose(1, 2)

        q = split(self.q_proj(queries), t_a)
        k = split(self.k_proj(states), t_v)
        v = split(self.v_proj(states), t_v)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        weights = F.softmax(scores, dim=-1)
        heads = weights @ v
        merged = heads.transpose(1, 2).reshape(b, t_a, self.heads * self.head_dim)
        return self.out_proj(merged), weights


class VisualProjector(nn.Module):
    """Per-frame linear map from aligned visual vectors to a
    single-channel feature map (B, 1, T, F_loc)."""

    def __init__(self, in_dim: int, freq: int):
        super().__init__()
        self.proj = nn.Linear(in_dim, freq)

    def forward(self, aligned):
        if aligned.dim() != 3 or aligned.shape[-1] != self.proj.in_features:
            raise ShapeError(
                f"expected (B, T, {self.proj.in_features}), got {tuple(aligned.shape)}"
            )
        return self.proj(aligned).unsqueeze(1)


class FuseAdd(nn.Module):
    """Channel-expand the visual map with a 1x1 conv, then add.

    Bias-free so a zero visual map is an exact additive identity.
    """

    def __init__(self, audio_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(1, audio_channels, kernel_size=1, bias=False)
        self.transparent_init_()

    def transparent_init_(self):
        with torch.no_grad():
            self.conv.weight.zero_()

    def forward(self, audio, visual_map):
        if audio.shape[0] != visual_map.shape[0] or audio.shape[2:] != visual_map.shape[2:]:
            raise ShapeError(
                f"visual map {tuple(visual_map.shape)} incompatible with audio "
                f"{tuple(audio.shape)}"
            )
        return audio + self.conv(visual_map)


class FuseConcat(nn.Module):
    """Concatenate along channels, restore the audio shape with a 1x1 conv.

    Constructed to select the audio channels exactly (identity weight on
    them, zero on the visual channel, no bias).
    """

    def __init__(self, audio_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(audio_channels + 1, audio_channels, kernel_size=1,
                              bias=False)
        self.transparent_init_()

    def transparent_init_(self):
        with torch.no_grad():
            self.conv.weight.zero_()
            for c in range(self.conv.out_channels):
                self.conv.weight[c, c, 0, 0] = 1.0

    def forward(self, audio, visual_map):
        if audio.shape[0] != visual_map.shape[0] or audio.shape[2:] != visual_map.shape[2:]:
            raise ShapeError(
                f"visual map {tuple(visual_map.shape)} incompatible with audio "
                f"{tuple(audio.shape)}"
            )
        return self.conv(torch.cat([audio, visual_map], dim=1))


class FusionModule(nn.Module):
    """Align -> project -> combine, bound to one tap location's shape.

    Serves as the fusion hook for the mask network: calling it with the
    audio feature map (and visual states set beforehand via
    ``set_states``) returns the fused map of identical shape.
    """

    def __init__(self, cfg: FusionConfig, audio_channels: int, audio_freq: int,
                 state_dim: int):
        super().__init__()
        self.cfg = cfg
        self.audio_channels = audio_channels
        self.audio_freq = audio_freq
        if cfg.align == "attention":
            self.query_proj = nn.Linear(audio_channels * audio_freq, cfg.attention_dim)
            self.attention = TemporalAttention(
                cfg.attention_dim, state_dim, cfg.attention_dim, cfg.attention_heads
            )
            aligned_dim = cfg.attention_dim
        else:
            self.query_proj = None
            self.attention = None
            aligned_dim = state_dim
        self.projector = VisualProjector(aligned_dim, audio_freq)
        self.combine = FuseAdd(audio_channels) if cfg.method == "add" \
            else FuseConcat(audio_channels)
        self._states = None

    def set_states(self, states: torch.Tensor) -> None:
        """Stash the (B, T_v, 2H) visual states for the next forward call."""
        self._states = states

    def align(self, audio_map: torch.Tensor, states: torch.Tensor) -> torch.Tensor:
        t_audio = audio_map.shape[2]
        if self.cfg.align == "upsample":
            return upsample_align(states, t_audio)
        b, c, t, f = audio_map.shape
        queries = self.query_proj(audio_map.permute(0, 2, 1, 3).reshape(b, t, c * f))
        aligned, _ = self.attention(queries, states)
        return aligned

    def forward(self, audio_map: torch.Tensor) -> torch.Tensor:
        if self._states is None:
            raise InvalidInput("visual states not set before fusion")
        if audio_map.shape[1] != self.audio_channels or audio_map.shape[3] != self.audio_freq:
            raise ShapeError(
                f"audio map {tuple(audio_map.shape)} does not match fusion location "
                f"({self.audio_channels} ch, {self.audio_freq} bins)"
            )
        aligned = self.align(audio_map, self._states)
        visual_map = self.projector(aligned)
        return self.combine(audio_map, visual_map)
