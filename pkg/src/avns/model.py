"""Assembly of the enhancement network: mask estimator plus optional
visual pathway, fusion module, and acoustic-event head."""

import contextlib
from dataclasses import dataclass

import torch
import torch.nn as nn

from .crn import Crn, CrnConfig, TapSet
from .errors import ConfigError, InvalidInput
from .fusion import FusionConfig, FusionModule
from .seeding import stream_seed
from .signal import StftConfig, apply_mask, istft, stft
from .visual import AedHead, VisualConfig, VisualEncoder

PARAM_SUBSETS = ("crn", "visual", "fusion", "aed")


@dataclass(frozen=True)
class ModelOutput:
    mask: torch.Tensor
    taps: TapSet
    aed_logits: torch.Tensor | None = None


@contextlib.contextmanager
def _init_scope(seed: int | None, purpose: str):
    """Draw submodule parameters from a named stream when a seed is given,
    without disturbing the caller's global RNG."""
    if seed is None:
        yield
        return
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(stream_seed(seed, purpose) & (2**63 - 1))
        yield


class NoiseSuppressor(nn.Module):
    """Audio-only or audio-visual mask network.

    Audio-visual models always carry the AED head; whether its loss is
    optimized is a training-stage concern, not an architectural one.
    Passing ``seed`` makes every submodule initialize from its own named
    stream, so the CRN inside an audio-visual model matches an audio-only
    model built from the same seed.
    """

    def __init__(self, crn_cfg: CrnConfig = CrnConfig(),
                 visual_cfg: VisualConfig | None = None,
                 fusion_cfg: FusionConfig | None = None,
                 seed: int | None = None):
        super().__init__()
        if (visual_cfg is None) != (fusion_cfg is None):
            raise ConfigError("visual and fusion configs must be given together")
        self.visual_cfg = visual_cfg
        self.fusion_cfg = fusion_cfg
        with _init_scope(seed, "init:crn"):
            self.crn = Crn(crn_cfg)
        if visual_cfg is not None:
            with _init_scope(seed, "init:visual"):
                self.visual = VisualEncoder(visual_cfg)
            with _init_scope(seed, "init:fusion"):
                self.fusion = FusionModule(
                    fusion_cfg, *self.crn.tap_shape(fusion_cfg.location),
                    state_dim=visual_cfg.state_dim,
                )
            with _init_scope(seed, "init:aed"):
                self.aed = AedHead(visual_cfg)
        else:
            self.visual = None
            self.fusion = None
            self.aed = None

    @property
    def is_audio_visual(self) -> bool:
        return self.visual is not None

    def forward(self, spec: torch.Tensor, features: torch.Tensor | None = None
                ) -> ModelOutput:
        """``spec`` is (B, 2, T, F); ``features`` is (B, T_v, D_v) for
        audio-visual models and must be omitted for audio-only ones."""
        if not self.is_audio_visual:
            if features is not None:
                raise InvalidInput("audio-only model given visual features")
            mask, taps = self.crn(spec)
            return ModelOutput(mask=mask, taps=taps)
        if features is None:
            raise InvalidInput("audio-visual model requires visual features")
        if features.dim() == 2:
            features = features.unsqueeze(0)
        states, pooled = self.visual(features)
        self.fusion.set_states(states)
        try:
            mask, taps = self.crn(
                spec, fusion_hook=self.fusion,
                fusion_location=self.fusion_cfg.location,
            )
        finally:
            self.fusion.set_states(None)
        return ModelOutput(mask=mask, taps=taps, aed_logits=self.aed(pooled))

    def param_subsets(self) -> dict[str, list[str]]:
        """Parameter names grouped by top-level submodule."""
        groups: dict[str, list[str]] = {name: [] for name in PARAM_SUBSETS}
        for name, _ in self.named_parameters():
            groups[name.split(".", 1)[0]].append(name)
        return groups

    def set_subset_frozen(self, subset: str, frozen: bool) -> None:
        if subset not in PARAM_SUBSETS:
            raise ConfigError(f"unknown parameter subset {subset!r}")
        module = getattr(self, subset)
        if module is None:
            raise ConfigError(f"model has no {subset!r} parameters")
        for p in module.parameters():
            p.requires_grad_(not frozen)


def enhance_waveform(model: NoiseSuppressor, wave: torch.Tensor,
                     features: torch.Tensor | None = None,
                     stft_cfg: StftConfig = StftConfig()) -> torch.Tensor:
    """Run the full enhancement chain on one waveform.

    Output length equals input length exactly.
    """
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            spec = stft(wave, stft_cfg).unsqueeze(0)
            feats = None
            if features is not None:
                feats = features.unsqueeze(0) if features.dim() == 2 else features
            out = model(spec, feats)
            est_spec = apply_mask(spec, out.mask)
            return istft(est_spec, stft_cfg, out_len=wave.shape[-1]).squeeze(0)
    finally:
        model.train(was_training)
