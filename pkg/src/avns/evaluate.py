"""Desk-scale evaluation: SI-SDR improvement, log-spectral distance,
acoustic-event metrics, and the fusion-ablation grid runner.

Perceptual metrics from the literature (PESQ/STOI/VISQOL/DNSMOS) need
external or licensed implementations; reports substitute SI-SDR
improvement and LSD and say so in their header.
"""

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .data import load_entry, read_manifest
from .errors import AvnsError, ConfigError, InvalidInput, MissingHead
from .fusion import FusionConfig
from .losses import si_sdr
from .model import NoiseSuppressor, enhance_waveform
from .signal import StftConfig, magnitude, stft
from .train import TrainConfig, init_av_from_audio, train_av
from .visual import labels_to_multihot

METRICS_NOTE = (
    "Metrics are SI-SDR improvement (dB) and log-spectral distance (dB); "
    "perceptual metrics (PESQ/STOI/VISQOL/DNSMOS) are out of scope and were "
    "not computed."
)

SNR_BUCKETS = (-20.0, -10.0, 0.0, 10.0, 20.0)

REPORT_SCHEMA = {
    "type": "object",
    "required": ["metrics_note", "records", "aggregate"],
    "properties": {
        "metrics_note": {"type": "string"},
        "records": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "snr_in_db", "snr_bucket_db", "si_sdr_in",
                             "si_sdr_out", "si_sdr_improvement", "lsd"],
                "properties": {
                    "id": {"type": "string"},
                    "snr_in_db": {"type": "number"},
                    "snr_bucket_db": {"type": "number"},
                    "si_sdr_in": {"type": "number"},
                    "si_sdr_out": {"type": "number"},
                    "si_sdr_improvement": {"type": "number"},
                    "lsd": {"type": "number"},
                    "aed_f1": {"type": ["number", "null"]},
                },
            },
        },
        "aggregate": {"type": "object"},
        "errors": {"type": "array"},
    },
}


def log_spectral_distance(clean: torch.Tensor, est: torch.Tensor,
                          stft_cfg: StftConfig = StftConfig(),
                          eps: float = 1e-10) -> float:
    """RMS over bins of the log magnitude ratio, in dB."""
    if clean.shape != est.shape:
        raise InvalidInput("length mismatch between clean and estimate")
    mag_c = magnitude(stft(clean.double(), stft_cfg))
    mag_e = magnitude(stft(est.double(), stft_cfg))
    ratio = 20.0 * torch.log10((mag_c + eps) / (mag_e + eps))
    return float(torch.sqrt(ratio.pow(2).mean()))


def snr_bucket(snr_db: float) -> float:
    return min(SNR_BUCKETS, key=lambda b: abs(b - snr_db))


def _example_f1(pred: np.ndarray, target: np.ndarray) -> float:
    tp = float(np.sum(pred * target))
    denom = float(np.sum(pred) + np.sum(target))
    return 2.0 * tp / denom if denom else 1.0


@dataclass(frozen=True)
class EvalRecord:
    id: str
    snr_in_db: float
    si_sdr_in: float
    si_sdr_out: float
    si_sdr_improvement: float
    lsd: float
    aed_f1: float | None = None

    def to_json_dict(self) -> dict:
        rec = {
            "id": self.id,
            "snr_in_db": self.snr_in_db,
            "snr_bucket_db": snr_bucket(self.snr_in_db),
            "si_sdr_in": self.si_sdr_in,
            "si_sdr_out": self.si_sdr_out,
            "si_sdr_improvement": self.si_sdr_improvement,
            "lsd": self.lsd,
        }
        if self.aed_f1 is not None:
            rec["aed_f1"] = self.aed_f1
        return rec


@dataclass
class EvalReport:
    records: list[EvalRecord]
    errors: list[dict]

    def aggregate(self) -> dict:
        def stats(values):
            arr = np.asarray(values, dtype=np.float64)
            return {"mean": float(arr.mean()), "std": float(arr.std()),
                    "count": int(arr.size)}

        agg: dict = {"all": {}}
        if self.records:
            agg["all"] = {
                "si_sdr_improvement": stats([r.si_sdr_improvement for r in self.records]),
                "lsd": stats([r.lsd for r in self.records]),
            }
            f1s = [r.aed_f1 for r in self.records if r.aed_f1 is not None]
            if f1s:
                agg["all"]["aed_f1"] = stats(f1s)
        by_bucket = {}
        for bucket in SNR_BUCKETS:
            rows = [r for r in self.records if snr_bucket(r.snr_in_db) == bucket]
            if rows:
                by_bucket[f"{bucket:+.0f}dB"] = {
                    "si_sdr_improvement": stats([r.si_sdr_improvement for r in rows]),
                    "lsd": stats([r.lsd for r in rows]),
                }
        agg["by_snr_bucket"] = by_bucket
        return agg

    def to_json(self) -> str:
        payload = {
            "metrics_note": METRICS_NOTE,
            "records": [r.to_json_dict() for r in self.records],
            "aggregate": self.aggregate(),
            "errors": self.errors,
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def evaluate(enhance_fn, manifest_path, stft_cfg: StftConfig = StftConfig(),
             aed_fn=None, num_labels: int | None = None,
             eps: float = 1e-8) -> EvalReport:
    """Run an enhancer over a manifest and collect per-entry metrics.

    ``enhance_fn(noisy, features) -> waveform`` is any callable honoring
    the length contract; ``aed_fn(features) -> logits`` is optional.
    Entries whose files are missing are recorded under ``errors`` and
    evaluation continues.
    """
    if aed_fn is not None and num_labels is None:
        raise ConfigError("num_labels is required when aed_fn is given")
    manifest_path = Path(manifest_path)
    records: list[EvalRecord] = []
    errors: list[dict] = []
    for i, entry in enumerate(read_manifest(manifest_path)):
        try:
            loaded = load_entry(entry, manifest_path.parent, index=i)
        except (OSError, AvnsError) as exc:
            errors.append({"id": entry.clean_path, "error": str(exc)})
            continue
        feats = loaded.features.features if loaded.features is not None else None
        enhanced = enhance_fn(loaded.noisy, feats)
        clean = loaded.clean.double()
        sd_in = float(si_sdr(clean, loaded.noisy.double(), eps))
        sd_out = float(si_sdr(clean, enhanced.double(), eps))
        aed_f1 = None
        if aed_fn is not None and feats is not None:
            logits = aed_fn(feats)
            pred = (torch.sigmoid(logits) > 0.5).double().numpy()
            target = labels_to_multihot(loaded.labels, num_labels).numpy()
            aed_f1 = _example_f1(pred, target)
        records.append(EvalRecord(
            id=entry.clean_path,
            snr_in_db=loaded.snr_db,
            si_sdr_in=sd_in,
            si_sdr_out=sd_out,
            si_sdr_improvement=sd_out - sd_in,
            lsd=log_spectral_distance(loaded.clean, enhanced, stft_cfg),
            aed_f1=aed_f1,
        ))
    return EvalReport(records=records, errors=errors)


def model_enhancer(model: NoiseSuppressor, stft_cfg: StftConfig = StftConfig()):
    """Wrap a model as an ``enhance_fn`` for :func:`evaluate`."""
    def enhance(noisy, features):
        feats = features if model.is_audio_visual else None
        return enhance_waveform(model, noisy, feats, stft_cfg)
    return enhance


def model_aed_fn(model: NoiseSuppressor, stage: str):
    """AED logits callable; only multi-task checkpoints expose the head."""
    if stage != "av-mtl" or model.aed is None:
        raise MissingHead("acoustic-event metrics need an av-mtl checkpoint")

    def logits_fn(features):
        was_training = model.training
        model.eval()
        try:
            with torch.no_grad():
                states, pooled = model.visual(features.unsqueeze(0))
                return model.aed(pooled).squeeze(0)
        finally:
            model.train(was_training)
    return logits_fn


def multilabel_prf(pred: np.ndarray, target: np.ndarray) -> dict:
    """Per-label precision/recall/F1 for (N, K) binary arrays."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    per_label = []
    for k in range(pred.shape[1]):
        tp = float(np.sum(pred[:, k] * target[:, k]))
        fp = float(np.sum(pred[:, k] * (1 - target[:, k])))
        fn = float(np.sum((1 - pred[:, k]) * target[:, k]))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_label.append({"precision": precision, "recall": recall, "f1": f1})
    macro_f1 = float(np.mean([m["f1"] for m in per_label]))
    return {"per_label": per_label, "macro_f1": macro_f1}


def aed_metrics(model: NoiseSuppressor, stage: str, manifest_path,
                threshold: float = 0.5) -> dict:
    """Per-label precision/recall/F1 over a manifest.

    Predictions are strictly greater than the threshold, so zero logits
    (sigmoid exactly 0.5) predict negative.
    """
    logits_fn = model_aed_fn(model, stage)
    num_labels = model.visual_cfg.num_labels
    manifest_path = Path(manifest_path)
    preds, targets = [], []
    for i, entry in enumerate(read_manifest(manifest_path)):
        loaded = load_entry(entry, manifest_path.parent, index=i)
        if loaded.features is None:
            continue
        logits = logits_fn(loaded.features.features)
        preds.append((torch.sigmoid(logits) > threshold).numpy())
        targets.append(labels_to_multihot(loaded.labels, num_labels).numpy())
    return multilabel_prf(np.stack(preds), np.stack(targets))


@dataclass(frozen=True)
class AblationCell:
    fusion: FusionConfig
    mean_si_sdr_improvement: float
    step0_si_sdr_improvement: float
    steps_trained: int
    seed: int
    error: str | None = None


def parse_grid_spec(spec: str) -> list[FusionConfig]:
    """Expand e.g. ``"loc=A,B;method=concat;align=upsample"`` into the
    Cartesian product of fusion configs."""
    choices = {"loc": ["C"], "method": ["concat"], "align": ["upsample"]}
    seen = set()
    for part in spec.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"malformed grid component {part!r}")
        key, _, values = part.partition("=")
        key = key.strip().lower()
        if key not in choices or key in seen:
            raise ConfigError(f"unknown or repeated grid key {key!r}")
        seen.add(key)
        choices[key] = [v.strip() for v in values.split(",") if v.strip()]
        if not choices[key]:
            raise ConfigError(f"grid key {key!r} has no values")
    cells = []
    for loc in choices["loc"]:
        for method in choices["method"]:
            for align in choices["align"]:
                cells.append(FusionConfig(location=loc, align=align, method=method))
    return cells


def _mean_improvement(model, manifest_path, stft_cfg) -> float:
    report = evaluate(model_enhancer(model, stft_cfg), manifest_path, stft_cfg)
    if not report.records:
        raise AvnsError("no records produced during grid evaluation")
    return report.aggregate()["all"]["si_sdr_improvement"]["mean"]


def ablation_grid(base_cfg: TrainConfig, manifest_path, audio_ckpt,
                  grid: list[FusionConfig], steps: int) -> list[AblationCell]:
    """Train one short run per fusion config from the shared audio-only
    checkpoint; cell failures are recorded and the grid continues."""
    cells = []
    for fusion_cfg in grid:
        cfg = replace(base_cfg, stage="av", fusion=fusion_cfg, max_steps=steps)
        try:
            model = init_av_from_audio(audio_ckpt, cfg)
            step0 = _mean_improvement(model, manifest_path, cfg.stft)
            model, _ = train_av(cfg, manifest_path, model)
            final = _mean_improvement(model, manifest_path, cfg.stft)
            cells.append(AblationCell(
                fusion=fusion_cfg, mean_si_sdr_improvement=final,
                step0_si_sdr_improvement=step0, steps_trained=steps,
                seed=cfg.seed,
            ))
        except (AvnsError, OSError) as exc:
            cells.append(AblationCell(
                fusion=fusion_cfg, mean_si_sdr_improvement=math.nan,
                step0_si_sdr_improvement=math.nan, steps_trained=0,
                seed=cfg.seed, error=str(exc),
            ))
    return cells


def write_grid_csv(cells: list[AblationCell], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["location", "align", "method", "steps", "seed",
                         "step0_improvement_db", "mean_improvement_db", "error"])
        for cell in sorted(cells, key=lambda c: c.fusion.label()):
            writer.writerow([
                cell.fusion.location, cell.fusion.align, cell.fusion.method,
                cell.steps_trained, cell.seed,
                repr(cell.step0_si_sdr_improvement),
                repr(cell.mean_si_sdr_improvement),
                cell.error or "",
            ])


def render_grid_svg(cells: list[AblationCell], path,
                    title: str = "SI-SDR improvement by fusion config") -> None:
    """Standalone deterministic SVG bar chart of per-cell improvements."""
    cells = sorted(cells, key=lambda c: c.fusion.label())
    width, height = 80 + 90 * max(1, len(cells)), 360
    plot_top, plot_bottom = 60, height - 80
    values = [0.0 if math.isnan(c.mean_si_sdr_improvement)
              else c.mean_si_sdr_improvement for c in cells]
    vmax = max(1e-6, max((abs(v) for v in values), default=1.0))
    zero_y = (plot_top + plot_bottom) / 2 if min(values, default=0) < 0 else plot_bottom
    scale = (zero_y - plot_top) / vmax

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="40" y1="{zero_y:.1f}" x2="{width - 20}" y2="{zero_y:.1f}" '
        'stroke="black" stroke-width="1"/>',
    ]
    for i, (cell, value) in enumerate(zip(cells, values)):
        x = 50 + 90 * i
        bar_h = abs(value) * scale
        y = zero_y - bar_h if value >= 0 else zero_y
        color = "#777777" if cell.error else "#4477aa"
        parts.append(
            f'<rect x="{x}" y="{y:.1f}" width="60" height="{bar_h:.1f}" '
            f'fill="{color}"/>'
        )
        label = cell.fusion.label()
        parts.append(
            f'<text x="{x + 30}" y="{height - 56}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="10">{label}</text>')
        shown = "failed" if cell.error else f"{value:+.2f} dB"
        parts.append(
            f'<text x="{x + 30}" y="{height - 40}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="10">{shown}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
