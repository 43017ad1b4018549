import pytest
import torch

from avns.crn import CrnConfig
from avns.data import CorpusConfig, generate_synthetic_corpus
from avns.fusion import FusionConfig
from avns.signal import StftConfig
from avns.train import TrainConfig
from avns.visual import VisualConfig

TINY_STFT = StftConfig(n_fft=64, hop=32)
TINY_CORPUS = CorpusConfig(num_labels=3, feature_dim=8, duration_s=0.1,
                           frame_rate=20.0)


def tiny_crn_cfg() -> CrnConfig:
    """Two-block ladder on 33 bins; pairs with the 64/32 STFT."""
    return CrnConfig(freq_bins=33, enc_channels=(4, 8), lstm_layers=1,
                     lstm_hidden=16)


def reduced_crn_cfg() -> CrnConfig:
    """Smallest gradient-check architecture: 2 blocks, 1 bLSTM, hidden 16."""
    return CrnConfig(freq_bins=33, enc_channels=(2, 4), lstm_layers=1,
                     lstm_hidden=16)


def tiny_visual_cfg() -> VisualConfig:
    return VisualConfig(feature_dim=8, num_labels=3, lstm_layers=1,
                        lstm_hidden=8)


def tiny_train_cfg(stage="audio", **kw) -> TrainConfig:
    base = dict(stage=stage, max_steps=5, batch_size=2, seed=3,
                checkpoint_every=5, stft=TINY_STFT, crn=tiny_crn_cfg())
    if stage != "audio":
        base["visual"] = tiny_visual_cfg()
        base["fusion"] = FusionConfig()
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """4-entry corpus with 0.1 s clips; returns the manifest path."""
    out = tmp_path_factory.mktemp("tiny_corpus")
    return generate_synthetic_corpus(out, 4, seed=11, cfg=TINY_CORPUS)


def rel_err(a: float, b: float, floor: float = 1e-3) -> float:
    """Two-sided relative error with an absolute floor for tiny values."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_gradcheck(model, loss_fn, h: float = 1e-4, floor: float = 1e-3):
    """Central finite differences over every parameter vs autograd.

    The model must be in float64 and eval mode, and ``loss_fn()`` must be
    a deterministic scalar function of the current parameters. Returns
    the worst relative error (see :func:`rel_err`).
    """
    for p in model.parameters():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    with torch.no_grad():
        for p in model.parameters():
            grad = p.grad
            assert grad is not None, "parameter missing from the autograd graph"
            flat = p.view(-1)
            gflat = grad.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                plus = loss_fn().item()
                flat[i] = orig - h
                minus = loss_fn().item()
                flat[i] = orig
                fd = (plus - minus) / (2.0 * h)
                worst = max(worst, rel_err(fd, gflat[i].item(), floor))
    return worst
