"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic  b"AVNS"
    u32    format version (currently 1)
    u32    entry count
    entry: u32 name length, name (UTF-8),
           u32 ndim, ndim * u32 dims,
           prod(dims) * float32 data

Model hyperparameters travel as small ``meta/...`` tensors so a file is
self-describing; parameter tensors use the module's state-dict names.
Loading is bit-exact and rejects unknown versions.
"""

import struct
from pathlib import Path

import numpy as np
import torch

from .crn import CrnConfig
from .errors import FormatError, InitError
from .fusion import ALIGNMENTS, LOCATIONS, METHODS, FusionConfig
from .model import NoiseSuppressor
from .signal import StftConfig
from .visual import VisualConfig

MAGIC = b"AVNS"
VERSION = 1

STAGES = ("audio", "av", "av-mtl")


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            # np.array, not ascontiguousarray: the latter promotes 0-d to 1-d
            data = np.array(arr, dtype="<f4", order="C", copy=True)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated checkpoint while reading {what}")
    return buf


def load_tensors(path) -> dict[str, np.ndarray]:
    path = Path(path)
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise FormatError(f"{path}: bad magic, not an AVNS checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported format version {version}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "entry count"))
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "shape"))
            n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            raw = _read_exact(fh, 4 * n, f"data of {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after last entry")
    return tensors


def _encode_meta(stage: str, stft_cfg: StftConfig, crn_cfg: CrnConfig,
                 visual_cfg: VisualConfig | None,
                 fusion_cfg: FusionConfig | None) -> dict[str, np.ndarray]:
    meta = {
        "meta/stage": np.array([STAGES.index(stage)], dtype=np.float32),
        "meta/stft": np.array([stft_cfg.n_fft, stft_cfg.hop], dtype=np.float32),
        "meta/crn": np.array(
            [crn_cfg.in_channels, crn_cfg.freq_bins, crn_cfg.lstm_layers,
             crn_cfg.hidden_size, *crn_cfg.kernel, *crn_cfg.stride],
            dtype=np.float32),
        "meta/enc_channels": np.array(crn_cfg.enc_channels, dtype=np.float32),
    }
    if visual_cfg is not None:
        meta["meta/visual"] = np.array(
            [visual_cfg.feature_dim, visual_cfg.num_labels,
             visual_cfg.lstm_layers, visual_cfg.lstm_hidden], dtype=np.float32)
    if fusion_cfg is not None:
        meta["meta/fusion"] = np.array(
            [LOCATIONS.index(fusion_cfg.location),
             ALIGNMENTS.index(fusion_cfg.align),
             METHODS.index(fusion_cfg.method),
             fusion_cfg.attention_heads, fusion_cfg.attention_dim],
            dtype=np.float32)
    return meta


def _decode_meta(tensors: dict[str, np.ndarray]):
    try:
        stage = STAGES[int(tensors["meta/stage"][0])]
        n_fft, hop = (int(v) for v in tensors["meta/stft"])
        in_ch, bins, layers, hidden, k_t, k_f, s_t, s_f = (
            int(v) for v in tensors["meta/crn"])
        enc = tuple(int(v) for v in tensors["meta/enc_channels"])
    except KeyError as exc:
        raise FormatError(f"checkpoint missing metadata entry {exc}") from exc
    crn_cfg = CrnConfig(in_channels=in_ch, freq_bins=bins, enc_channels=enc,
                        kernel=(k_t, k_f), stride=(s_t, s_f),
                        lstm_layers=layers, lstm_hidden=hidden)
    stft_cfg = StftConfig(n_fft=n_fft, hop=hop)
    visual_cfg = fusion_cfg = None
    if "meta/visual" in tensors:
        d, k, vl, vh = (int(v) for v in tensors["meta/visual"])
        visual_cfg = VisualConfig(feature_dim=d, num_labels=k,
                                  lstm_layers=vl, lstm_hidden=vh)
        loc, align, method, heads, dim = (int(v) for v in tensors["meta/fusion"])
        fusion_cfg = FusionConfig(location=LOCATIONS[loc], align=ALIGNMENTS[align],
                                  method=METHODS[method], attention_heads=heads,
                                  attention_dim=dim)
    return stage, stft_cfg, crn_cfg, visual_cfg, fusion_cfg


def model_tensors(model: NoiseSuppressor) -> dict[str, np.ndarray]:
    """State dict as float32 arrays (integer buffers are cast exactly)."""
    out = {}
    for name, tensor in model.state_dict().items():
        out[name] = tensor.detach().cpu().numpy().astype(np.float32)
    return out


def save_model(path, model: NoiseSuppressor, stage: str,
               stft_cfg: StftConfig = StftConfig()) -> None:
    if stage not in STAGES:
        raise FormatError(f"unknown training stage {stage!r}")
    crn_cfg = model.crn.cfg
    # persist the resolved hidden size so the file stands alone
    crn_cfg = CrnConfig(
        in_channels=crn_cfg.in_channels, freq_bins=crn_cfg.freq_bins,
        enc_channels=crn_cfg.enc_channels, kernel=crn_cfg.kernel,
        stride=crn_cfg.stride, lstm_layers=crn_cfg.lstm_layers,
        lstm_hidden=crn_cfg.hidden_size,
    )
    tensors = _encode_meta(stage, stft_cfg, crn_cfg, model.visual_cfg,
                           model.fusion_cfg)
    tensors.update(model_tensors(model))
    save_tensors(path, tensors)


def load_model(path):
    """Rebuild the model a checkpoint describes and load its weights.

    Returns ``(model, stage, stft_cfg)``; every state tensor must be
    present with a matching shape.
    """
    tensors = load_tensors(path)
    stage, stft_cfg, crn_cfg, visual_cfg, fusion_cfg = _decode_meta(tensors)
    model = NoiseSuppressor(crn_cfg, visual_cfg, fusion_cfg, seed=0)
    load_state_from_tensors(model, tensors, source=str(path))
    return model, stage, stft_cfg


def load_state_from_tensors(model: NoiseSuppressor,
                            tensors: dict[str, np.ndarray],
                            source: str = "checkpoint",
                            required_prefix: str | None = None) -> None:
    """Copy checkpoint arrays into matching model state entries.

    With ``required_prefix`` only that submodule's tensors are consumed
    (used when seeding an audio-visual model from an audio-only file).
    """
    state = model.state_dict()
    for name, tensor in state.items():
        if required_prefix is not None and not name.startswith(required_prefix):
            continue
        if name not in tensors:
            raise InitError(f"{source} is missing tensor {name!r}")
        arr = tensors[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise InitError(
                f"{source}: tensor {name!r} has shape {tuple(arr.shape)}, "
                f"model expects {tuple(tensor.shape)}"
            )
        with torch.no_grad():
            tensor.copy_(torch.from_numpy(arr).to(tensor.dtype))
