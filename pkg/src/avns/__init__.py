"""Audio-visual noise suppression: a convolutional recurrent mask
estimator with optional visual fusion and multi-task acoustic-event
supervision."""

__version__ = "0.1.0"

from .crn import Crn, CrnConfig, TapSet
from .errors import AvnsError
from .fusion import FusionConfig
from .losses import LossWeights
from .model import NoiseSuppressor, enhance_waveform
from .signal import StftConfig, apply_mask, istft, magnitude, stft
from .train import TrainConfig, init_av_from_audio, pretrain_audio, train_av
from .visual import VisualConfig

__all__ = [
    "AvnsError", "Crn", "CrnConfig", "FusionConfig", "LossWeights",
    "NoiseSuppressor", "StftConfig", "TapSet", "TrainConfig", "VisualConfig",
    "apply_mask", "enhance_waveform", "init_av_from_audio", "istft",
    "magnitude", "pretrain_audio", "stft", "train_av", "__version__",
]
