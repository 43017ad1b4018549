"""Training stages: audio-only pretraining, audio-visual fine-tuning with
freeze-then-finetune scheduling, and the multi-task variant.

All batch sampling randomness is stateless (derived from the step index),
so a run resumed from a mid-run checkpoint reproduces the uninterrupted
run bit-for-bit.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (load_model, load_state_from_tensors, load_tensors,
                         save_model)
from .crn import CrnConfig
from .data import LoadedEntry, load_entry, read_manifest
from .errors import ConfigError, InitError, NumericError
from .fusion import FusionConfig
from .losses import (LossWeights, bce_multilabel, l1_time, si_sdr,
                     total_mtl_loss, weighted_stft_loss)
from .model import NoiseSuppressor
from .seeding import stream_rng
from .signal import StftConfig, apply_mask, istft, magnitude, stft
from .visual import VisualConfig, labels_to_multihot

STAGES = ("audio", "av", "av-mtl")
LOG_FIELDS = ("step", "loss", "l1", "wstft", "sisdr", "aed")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "audio"
    max_steps: int = 300
    batch_size: int = 2
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    freeze_visual_steps: int = 0
    seed: int = 0
    checkpoint_every: int = 50
    grad_clip: float = 5.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    stft: StftConfig = field(default_factory=StftConfig)
    crn: CrnConfig = field(default_factory=CrnConfig)
    visual: VisualConfig | None = None
    fusion: FusionConfig | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.lr <= 0 or self.max_steps < 0 or self.batch_size < 1:
            raise ConfigError("lr, max_steps, and batch_size must be positive")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be positive")
        if self.stage == "audio":
            if self.fusion is not None or self.visual is not None:
                raise ConfigError("audio stage forbids fusion/visual configuration")
        else:
            if self.fusion is None or self.visual is None:
                raise ConfigError(f"stage {self.stage!r} requires fusion and visual configs")
        if self.freeze_visual_steps < 0:
            raise ConfigError("freeze_visual_steps must be >= 0")


class Dataset:
    """Manifest entries materialized once and grouped by shape so every
    batch stacks cleanly."""

    def __init__(self, manifest_path, num_labels: int | None = None,
                 fallback_seed: int = 0):
        manifest_path = Path(manifest_path)
        self.base_dir = manifest_path.parent
        self.entries: list[LoadedEntry] = [
            load_entry(e, self.base_dir, index=i, fallback_seed=fallback_seed)
            for i, e in enumerate(read_manifest(manifest_path))
        ]
        if not self.entries:
            raise ConfigError(f"manifest {manifest_path} is empty")
        self.num_labels = num_labels
        self._groups: dict[tuple, list[int]] = {}
        for i, entry in enumerate(self.entries):
            t_v = entry.features.features.shape[0] if entry.features else 0
            self._groups.setdefault((entry.clean.shape[-1], t_v), []).append(i)

    def __len__(self):
        return len(self.entries)

    def sample_batch(self, rng: np.random.Generator, batch_size: int):
        keys = sorted(self._groups)
        weights = np.array([len(self._groups[k]) for k in keys], dtype=np.float64)
        key = keys[rng.choice(len(keys), p=weights / weights.sum())]
        pool = self._groups[key]
        idx = rng.integers(0, len(pool), size=batch_size)
        return [self.entries[pool[i]] for i in idx]

    def batch_tensors(self, batch: list[LoadedEntry], with_features: bool):
        noisy = torch.stack([e.noisy for e in batch])
        clean = torch.stack([e.clean for e in batch])
        feats = targets = None
        if with_features:
            if any(e.features is None for e in batch):
                raise ConfigError(
                    "audio-visual training requires features_path on every entry")
            feats = torch.stack([e.features.features for e in batch])
            targets = torch.stack([
                labels_to_multihot(e.labels, self.num_labels) for e in batch
            ])
        return noisy, clean, feats, targets


@dataclass
class StepMetrics:
    loss: float
    l1: float
    wstft: float
    sisdr: float
    aed: float

    def row(self, step: int) -> dict:
        return {"step": step, "loss": repr(self.loss), "l1": repr(self.l1),
                "wstft": repr(self.wstft), "sisdr": repr(self.sisdr),
                "aed": repr(self.aed)}


def _batch_losses(model: NoiseSuppressor, cfg: TrainConfig, noisy, clean,
                  feats, targets):
    """Training objective plus per-component diagnostics.

    The AED term is always evaluated when a head exists (so audio-visual
    and multi-task logs are comparable) but only enters the objective in
    the multi-task stage.
    """
    w = cfg.loss_weights
    spec = stft(noisy, cfg.stft)
    out = model(spec, feats)
    if not torch.isfinite(out.mask).all():
        raise NumericError("model produced a non-finite mask; aborting")
    est = istft(apply_mask(spec, out.mask), cfg.stft, out_len=noisy.shape[-1])

    l1 = l1_time(clean, est)
    ws = weighted_stft_loss(
        magnitude(stft(clean, cfg.stft)), magnitude(stft(est, cfg.stft)),
        w.band_weights,
    )
    si = si_sdr(clean, est, w.epsilon).mean()
    ns = w.lambda1 * l1 + w.lambda2 * ws - w.lambda3 * si

    aed = None
    if out.aed_logits is not None and targets is not None:
        aed = bce_multilabel(out.aed_logits, targets)
    if cfg.stage == "av-mtl":
        loss = total_mtl_loss(ns, aed, w)
    else:
        loss = ns
    metrics = StepMetrics(
        loss=float(loss.detach()), l1=float(l1.detach()),
        wstft=float(ws.detach()), sisdr=float(si.detach()),
        aed=float(aed.detach()) if aed is not None else 0.0,
    )
    return loss, metrics


def corpus_loss(model: NoiseSuppressor, cfg: TrainConfig,
                dataset: Dataset) -> StepMetrics:
    """Objective over the whole corpus, eval mode, no gradient."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            totals = np.zeros(5)
            for entry in dataset.entries:
                noisy, clean, feats, targets = dataset.batch_tensors(
                    [entry], with_features=model.is_audio_visual)
                _, m = _batch_losses(model, cfg, noisy, clean, feats, targets)
                totals += [m.loss, m.l1, m.wstft, m.sisdr, m.aed]
            totals /= len(dataset.entries)
            return StepMetrics(*totals)
    finally:
        model.train(was_training)


class _CsvLog:
    def __init__(self, path):
        self.path = Path(path) if path else None
        self.rows = []

    def add(self, step: int, metrics: StepMetrics):
        self.rows.append(metrics.row(step))

    def flush(self):
        if self.path is None:
            return
        with open(self.path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            writer.writeheader()
            writer.writerows(self.rows)


def _apply_freeze(model: NoiseSuppressor, cfg: TrainConfig, step: int) -> None:
    if not model.is_audio_visual:
        return
    frozen = step < cfg.freeze_visual_steps
    model.set_subset_frozen("visual", frozen)


def train_loop(model: NoiseSuppressor, cfg: TrainConfig, dataset: Dataset,
               ckpt_path=None, log_path=None, resume_state=None):
    """Run ``cfg.max_steps`` optimizer steps.

    Logs a row for step 0 (pre-update) and every ``checkpoint_every``
    steps thereafter, plus a final row at ``max_steps``. Returns the
    trained model and its log rows. Saving happens at the same cadence
    when ``ckpt_path`` is given, with an optimizer sidecar for resume.
    """
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)
    start_step = 0
    log = _CsvLog(log_path)
    if resume_state is not None:
        optimizer.load_state_dict(resume_state["optimizer"])
        start_step = resume_state["step"]
        log.rows = list(resume_state["log_rows"])

    def save(step):
        if ckpt_path is None:
            return
        save_model(ckpt_path, model, cfg.stage, cfg.stft)
        torch.save(
            {"optimizer": optimizer.state_dict(), "step": step,
             "log_rows": log.rows},
            str(ckpt_path) + ".opt.pt",
        )
        log.flush()

    def step_losses(step):
        rng = stream_rng(cfg.seed, f"batch:{step}")
        batch = dataset.sample_batch(rng, cfg.batch_size)
        noisy, clean, feats, targets = dataset.batch_tensors(
            batch, with_features=model.is_audio_visual)
        loss, metrics = _batch_losses(model, cfg, noisy, clean, feats, targets)
        if not np.isfinite(metrics.loss):
            raise NumericError(
                f"non-finite loss {metrics.loss} at step {step}; aborting"
            )
        return loss, metrics

    for step in range(start_step, cfg.max_steps):
        _apply_freeze(model, cfg, step)
        loss, metrics = step_losses(step)
        if step == 0 or (step % cfg.checkpoint_every == 0 and step > start_step):
            log.add(step, metrics)
            if step > 0:
                save(step)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(
            [p for p in model.parameters() if p.requires_grad], cfg.grad_clip)
        optimizer.step()

    if cfg.max_steps > 0:
        # final row: eval mode so batch-norm state is left untouched
        model.eval()
        with torch.no_grad():
            _, final = step_losses(cfg.max_steps)
        model.train()
        log.add(cfg.max_steps, final)
    save(cfg.max_steps)
    log.flush()
    return model, log.rows


def resume_training(cfg: TrainConfig, manifest_path, ckpt_path, log_path=None):
    """Continue an interrupted run from its checkpoint and sidecar."""
    model, stage, _ = load_model(ckpt_path)
    if stage != cfg.stage:
        raise InitError(f"checkpoint stage {stage!r} != config stage {cfg.stage!r}")
    state = torch.load(str(ckpt_path) + ".opt.pt", weights_only=False)
    dataset = Dataset(
        manifest_path,
        num_labels=cfg.visual.num_labels if cfg.visual else None,
        fallback_seed=cfg.seed,
    )
    return train_loop(model, cfg, dataset, ckpt_path=ckpt_path,
                      log_path=log_path, resume_state=state)


def pretrain_audio(cfg: TrainConfig, manifest_path, ckpt_path=None,
                   log_path=None):
    """Stage one: train the mask network alone on the reconstruction loss."""
    if cfg.stage != "audio":
        raise ConfigError("pretrain_audio requires the audio stage")
    model = NoiseSuppressor(cfg.crn, seed=cfg.seed)
    dataset = Dataset(manifest_path, fallback_seed=cfg.seed)
    return train_loop(model, cfg, dataset, ckpt_path=ckpt_path, log_path=log_path)


def init_av_from_audio(audio_ckpt, cfg: TrainConfig) -> NoiseSuppressor:
    """Build the audio-visual model seeded from an audio-only checkpoint.

    The mask-network weights are copied exactly; the fusion combine layer
    keeps its transparent construction, so the fused forward pass equals
    the audio-only pass until training moves it.
    """
    if cfg.stage == "audio":
        raise ConfigError("init_av_from_audio requires an audio-visual stage")
    tensors = load_tensors(audio_ckpt)
    model = NoiseSuppressor(cfg.crn, cfg.visual, cfg.fusion, seed=cfg.seed)
    load_state_from_tensors(model, tensors, source=str(audio_ckpt),
                            required_prefix="crn.")
    return model


def train_av(cfg: TrainConfig, manifest_path, init_model: NoiseSuppressor,
             ckpt_path=None, log_path=None):
    """Stage two/three: fine-tune the audio-visual model, optionally with
    the multi-task acoustic-event objective."""
    if cfg.stage == "audio":
        raise ConfigError("train_av requires an audio-visual stage")
    dataset = Dataset(manifest_path, num_labels=cfg.visual.num_labels,
                      fallback_seed=cfg.seed)
    return train_loop(init_model, cfg, dataset, ckpt_path=ckpt_path,
                      log_path=log_path)
