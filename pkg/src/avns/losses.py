"""Training criteria: time-domain L1, sub-band weighted magnitude loss,
SI-SDR, their weighted composite, multilabel BCE, and the multi-task total.

All reductions are means so loss magnitudes are independent of signal
length and batch size. Waveform arguments may carry leading batch dims.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import InvalidInput, InvalidReference
from .signal import StftConfig, magnitude, stft


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 22.62
    lambda3: float = 0.001
    band_weights: tuple[float, float, float, float] = (0.1, 1.0, 1.5, 1.5)
    alpha1: float = 1.0
    alpha2: float = 50.0
    epsilon: float = 1e-8

    def __post_init__(self):
        if len(self.band_weights) != 4:
            raise InvalidInput("exactly 4 band weights required")
        values = (self.lambda1, self.lambda2, self.lambda3, self.alpha1,
                  self.alpha2, self.epsilon, *self.band_weights)
        if any(v < 0 for v in values):
            raise InvalidInput("loss weights must be non-negative")


def l1_time(clean: torch.Tensor, est: torch.Tensor) -> torch.Tensor:
    """Mean absolute sample difference."""
    if clean.shape != est.shape:
        raise InvalidInput(f"length mismatch: {tuple(clean.shape)} vs {tuple(est.shape)}")
    return (clean - est).abs().mean()


def band_slices(freq_bins: int) -> list[slice]:
    """Split ``freq_bins`` into 4 contiguous low-to-high sub-bands.

    Remainder bins go to the lowest bands, so 161 splits as (41, 40, 40, 40).
    """
    base, rem = divmod(freq_bins, 4)
    sizes = [base + (1 if k < rem else 0) for k in range(4)]
    edges = [0]
    for s in sizes:
        edges.append(edges[-1] + s)
    return [slice(edges[k], edges[k + 1]) for k in range(4)]


def weighted_stft_loss(
    mag_clean: torch.Tensor,
    mag_est: torch.Tensor,
    band_weights=(0.1, 1.0, 1.5, 1.5),
) -> torch.Tensor:
    """Sum over sub-bands of ``w_k * mean|S_k - S_est_k|``."""
    if mag_clean.shape != mag_est.shape:
        raise InvalidInput(
            f"shape mismatch: {tuple(mag_clean.shape)} vs {tuple(mag_est.shape)}"
        )
    if len(band_weights) != 4:
        raise InvalidInput("exactly 4 band weights required")
    diff = (mag_clean - mag_est).abs()
    total = diff.new_zeros(())
    for w, sl in zip(band_weights, band_slices(diff.shape[-1])):
        total = total + w * diff[..., sl].mean()
    return total


def si_sdr(s: torch.Tensor, est: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Scale-invariant SDR in dB, reduced over the last dim.

    The optimal scale is ``a = <s, est> / (|s|^2 + eps)`` and the value is
    ``10 log10((|a s|^2 + eps) / (|a s - est|^2 + eps))``.
    """
    if s.shape != est.shape:
        raise InvalidInput(f"length mismatch: {tuple(s.shape)} vs {tuple(est.shape)}")
    energy = s.pow(2).sum(dim=-1, keepdim=True)
    if (energy == 0).any():
        raise InvalidReference("reference signal has zero energy")
    alpha = (s * est).sum(dim=-1, keepdim=True) / (energy + eps)
    target = alpha * s
    num = target.pow(2).sum(dim=-1) + eps
    den = (target - est).pow(2).sum(dim=-1) + eps
    return 10.0 * torch.log10(num / den)


def ns_loss(
    clean: torch.Tensor,
    est: torch.Tensor,
    weights: LossWeights = LossWeights(),
    stft_cfg: StftConfig = StftConfig(),
    clean_mag: torch.Tensor | None = None,
) -> torch.Tensor:
    """Composite reconstruction loss.

    ``lambda1 * L1 + lambda2 * W-STFT + lambda3 * (-SI-SDR)``; the SI-SDR
    term enters negated so that minimizing the total improves fidelity.
    ``clean_mag`` short-circuits the clean-side analysis when the caller
    caches it across steps.
    """
    if clean_mag is None:
        clean_mag = magnitude(stft(clean, stft_cfg))
    est_mag = magnitude(stft(est, stft_cfg))
    total = weights.lambda1 * l1_time(clean, est)
    total = total + weights.lambda2 * weighted_stft_loss(
        clean_mag, est_mag, weights.band_weights
    )
    total = total - weights.lambda3 * si_sdr(clean, est, weights.epsilon).mean()
    return total


def bce_multilabel(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean multilabel binary cross-entropy from raw logits.

    Uses the log-sum-exp form (via ``binary_cross_entropy_with_logits``)
    so extreme logits do not overflow.
    """
    if logits.shape != targets.shape:
        raise InvalidInput(
            f"length mismatch: {tuple(logits.shape)} vs {tuple(targets.shape)}"
        )
    tgt = targets.to(logits.dtype)
    if ((tgt != 0) & (tgt != 1)).any():
        raise InvalidInput("targets must be binary")
    return F.binary_cross_entropy_with_logits(logits, tgt, reduction="mean")


def total_mtl_loss(ns, aed, weights: LossWeights = LossWeights()):
    """Multi-task total ``alpha1 * ns + alpha2 * aed``."""
    return weights.alpha1 * ns + weights.alpha2 * aed
