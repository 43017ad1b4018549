"""Visual pathway: recurrent encoder over precomputed per-frame features
and the auxiliary acoustic-event-detection head."""

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, InvalidInput, ShapeError


@dataclass(frozen=True)
class VisualConfig:
    feature_dim: int = 32
    num_labels: int = 5
    lstm_layers: int = 2
    lstm_hidden: int = 128

    def __post_init__(self):
        if min(self.feature_dim, self.num_labels, self.lstm_layers, self.lstm_hidden) < 1:
            raise ConfigError("visual sizes must be positive")

    @property
    def state_dim(self) -> int:
        return 2 * self.lstm_hidden


@dataclass(frozen=True)
class VisualFeatureSequence:
    """Per-frame embeddings (T_v, D_v); per-video features use T_v == 1
    with broadcast semantics downstream."""

    features: torch.Tensor
    frame_rate: float
    per_video: bool = False

    def __post_init__(self):
        if self.features.dim() != 2 or min(self.features.shape) < 1:
            raise InvalidInput(
                f"features must be (T_v, D_v), got {tuple(self.features.shape)}"
            )
        if not torch.isfinite(self.features).all():
            raise InvalidInput("features contain non-finite values")
        if self.per_video and self.features.shape[0] != 1:
            raise InvalidInput("per-video features must have a single frame")
        if self.frame_rate <= 0:
            raise InvalidInput("frame rate must be positive")


class VisualEncoder(nn.Module):
    """Bidirectional recurrence over visual frames.

    Returns per-frame states (T_v, 2H) and their temporal mean, which the
    AED head consumes. Accepts unbatched (T_v, D) or batched (B, T_v, D)
    input, mirroring ``nn.LSTM``.
    """

    def __init__(self, cfg: VisualConfig):
        super().__init__()
        self.cfg = cfg
        self.lstm = nn.LSTM(
            cfg.feature_dim, cfg.lstm_hidden, num_layers=cfg.lstm_layers,
            batch_first=True, bidirectional=True,
        )

    def forward(self, features):
        if features.dim() not in (2, 3) or features.shape[-1] != self.cfg.feature_dim:
            raise ShapeError(
                f"expected (..., T_v, {self.cfg.feature_dim}), got {tuple(features.shape)}"
            )
        states, _ = self.lstm(features)
        pooled = states.mean(dim=-2)
        return states, pooled


class AedHead(nn.Module):
    """Linear projection from pooled visual states to multilabel logits."""

    def __init__(self, cfg: VisualConfig):
        super().__init__()
        self.proj = nn.Linear(cfg.state_dim, cfg.num_labels)

    def forward(self, pooled):
        if pooled.shape[-1] != self.proj.in_features:
            raise ShapeError(
                f"pooled dim {pooled.shape[-1]} != {self.proj.in_features}"
            )
        return self.proj(pooled)


def labels_to_multihot(labels, num_labels: int) -> torch.Tensor:
    """Index list -> binary target vector."""
    target = torch.zeros(num_labels)
    for k in labels:
        if not 0 <= k < num_labels:
            raise InvalidInput(f"label index {k} out of range [0, {num_labels})")
        target[k] = 1.0
    return target
