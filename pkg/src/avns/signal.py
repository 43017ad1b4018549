"""STFT analysis/synthesis, complex-mask application, and WAV I/O.

Conventions used throughout the package:

* a waveform is a 1-D float tensor of 16 kHz samples (leading batch dims
  are accepted where noted);
* a complex spectrogram is a real tensor of shape ``(..., 2, T, F)`` with
  channel 0 the real part and channel 1 the imaginary part;
* the default analysis uses a 320-point periodic Hann window with hop 160
  and reflection center-padding, giving ``F = 161`` frequency bins and
  ``T = 1 + len // hop`` frames.
"""

from dataclasses import dataclass

import numpy as np
import scipy.io.wavfile
import torch
import torch.nn.functional as F

from .errors import FormatError, InvalidInput, InvalidMask, ShapeError

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis parameters.

    The hop must divide the FFT size with an overlap factor of at least 2
    so the periodic Hann window satisfies the constant-overlap-add
    condition required for perfect reconstruction.
    """

    n_fft: int = 320
    hop: int = 160
    center_pad: bool = True

    def __post_init__(self):
        if self.n_fft <= 0 or self.hop <= 0:
            raise InvalidInput("n_fft and hop must be positive")
        if self.n_fft % 2 != 0:
            raise InvalidInput("n_fft must be even")
        if self.n_fft % self.hop != 0 or self.n_fft // self.hop < 2:
            raise InvalidInput(
                f"hop {self.hop} must divide n_fft {self.n_fft} with overlap >= 2"
            )

    @property
    def freq_bins(self) -> int:
        return self.n_fft // 2 + 1

    def num_frames(self, num_samples: int) -> int:
        if not self.center_pad:
            return 1 + (num_samples - self.n_fft) // self.hop
        return 1 + num_samples // self.hop

    def window(self, dtype=torch.float32, device=None) -> torch.Tensor:
        return torch.hann_window(
            self.n_fft, periodic=True, dtype=dtype, device=device
        )


def _check_wave(wave: torch.Tensor, cfg: StftConfig) -> None:
    if wave.numel() == 0:
        raise InvalidInput("empty waveform")
    if not torch.isfinite(wave).all():
        raise InvalidInput("waveform contains non-finite samples")
    if wave.shape[-1] < cfg.n_fft:
        raise InvalidInput(
            f"waveform length {wave.shape[-1]} shorter than n_fft {cfg.n_fft}"
        )


def stft(wave: torch.Tensor, cfg: StftConfig = StftConfig()) -> torch.Tensor:
    """Forward transform, ``(..., L) -> (..., 2, T, F)``."""
    _check_wave(wave, cfg)
    lead = wave.shape[:-1]
    flat = wave.reshape(-1, wave.shape[-1]) if lead else wave.unsqueeze(0)
    spec = torch.stft(
        flat,
        n_fft=cfg.n_fft,
        hop_length=cfg.hop,
        window=cfg.window(wave.dtype, wave.device),
        center=cfg.center_pad,
        pad_mode="reflect",
        normalized=False,
        onesided=True,
        return_complex=True,
    )
    # (B, F, T) complex -> (B, 2, T, F) real
    out = torch.view_as_real(spec).permute(0, 3, 2, 1).contiguous()
    return out.reshape(*lead, *out.shape[1:]) if lead else out.squeeze(0)


def _check_spec(spec: torch.Tensor, cfg: StftConfig) -> None:
    if spec.dim() < 3 or spec.shape[-3] != 2:
        raise ShapeError(f"expected (..., 2, T, F) spectrogram, got {tuple(spec.shape)}")
    if spec.shape[-1] != cfg.freq_bins:
        raise ShapeError(
            f"spectrogram has {spec.shape[-1]} bins, config implies {cfg.freq_bins}"
        )
    if not torch.isfinite(spec).all():
        raise InvalidInput("spectrogram contains non-finite entries")


def istft(
    spec: torch.Tensor, cfg: StftConfig = StftConfig(), out_len: int | None = None
) -> torch.Tensor:
    """Overlap-add inverse with window-square normalization.

    The synthesis output is truncated or zero-padded to ``out_len``
    samples (default: the natural length ``(T - 1) * hop``).
    """
    _check_spec(spec, cfg)
    n_frames = spec.shape[-2]
    # last sample the overlap-add envelope covers; zeros beyond it
    natural = (n_frames - 1) * cfg.hop + (
        cfg.n_fft // 2 if cfg.center_pad else cfg.n_fft
    )
    if out_len is None:
        out_len = natural
    if out_len <= 0:
        raise InvalidInput("out_len must be positive")
    lead = spec.shape[:-3]
    flat = spec.reshape(-1, 2, *spec.shape[-2:])
    cplx = torch.view_as_complex(
        flat.permute(0, 3, 2, 1).contiguous()
    )  # (B, F, T)
    wave = torch.istft(
        cplx,
        n_fft=cfg.n_fft,
        hop_length=cfg.hop,
        window=cfg.window(spec.dtype, spec.device),
        center=cfg.center_pad,
        length=min(out_len, natural),
    )
    if out_len > natural:
        wave = F.pad(wave, (0, out_len - natural))
    return wave.reshape(*lead, out_len) if lead else wave.squeeze(0)


def apply_mask(noisy: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-channel multiplicative gating: ``out[c] = mask[c] * noisy[c]``.

    The real-channel mask scales the real part and the imaginary-channel
    mask the imaginary part; no complex product is formed.
    """
    if noisy.shape != mask.shape:
        raise ShapeError(f"mask shape {tuple(mask.shape)} != input {tuple(noisy.shape)}")
    if mask.numel() and (mask.min() < 0 or mask.max() > 1):
        raise InvalidMask(
            f"mask values in [{mask.min().item():.4g}, {mask.max().item():.4g}], "
            "expected [0, 1]"
        )
    return mask * noisy


def magnitude(spec: torch.Tensor) -> torch.Tensor:
    """Per-bin magnitude, ``(..., 2, T, F) -> (..., T, F)``.

    Uses ``vector_norm`` rather than a bare sqrt so the gradient at
    exactly-zero bins is the zero subgradient instead of NaN (zero bins do
    occur in float32 spectra of synthesized estimates).
    """
    if spec.dim() < 3 or spec.shape[-3] != 2:
        raise ShapeError(f"expected (..., 2, T, F) spectrogram, got {tuple(spec.shape)}")
    return torch.linalg.vector_norm(spec, dim=-3)


def read_wav(path) -> torch.Tensor:
    """Read a mono 16 kHz WAV file as a float32 tensor in [-1, 1).

    Accepts PCM 16-bit (scaled by 1/32768) or IEEE float32 payloads.
    """
    try:
        rate, data = scipy.io.wavfile.read(path)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if rate != SAMPLE_RATE:
        raise InvalidInput(f"{path}: sample rate {rate}, expected {SAMPLE_RATE}")
    if data.ndim != 1:
        raise InvalidInput(f"{path}: expected mono audio, got {data.ndim} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = data
    else:
        raise InvalidInput(f"{path}: unsupported sample format {data.dtype}")
    wave = torch.from_numpy(samples.copy())
    if not torch.isfinite(wave).all():
        raise InvalidInput(f"{path}: non-finite samples")
    return wave


def write_wav(path, wave: torch.Tensor, pcm16: bool = False) -> None:
    """Write a mono 16 kHz WAV file (IEEE float32 by default)."""
    if wave.dim() != 1:
        raise InvalidInput(f"expected 1-D waveform, got shape {tuple(wave.shape)}")
    if not torch.isfinite(wave).all():
        raise InvalidInput("waveform contains non-finite samples")
    data = wave.detach().cpu().numpy().astype(np.float32)
    if pcm16:
        scaled = np.clip(np.rint(data * 32768.0), -32768, 32767)
        data = scaled.astype(np.int16)
    scipy.io.wavfile.write(path, SAMPLE_RATE, data)
