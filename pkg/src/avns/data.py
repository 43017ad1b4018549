"""Dataset construction: volume normalization, SNR-controlled mixing,
manifests, the AVF1 visual-feature file format, and a synthetic
desk-scale corpus generator.

Every entry's randomness derives from (seed, entry index), so corpus
generation and mixing are reproducible file-for-file and parallel runs
match serial ones.
"""

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, InvalidInput
from .seeding import stream_rng, stream_seed
from .signal import SAMPLE_RATE, read_wav, write_wav
from .visual import VisualFeatureSequence

AVF_MAGIC = b"AVF1"
AVF_VERSION = 1
CROSSFADE_SECONDS = 0.010


@dataclass(frozen=True)
class MixManifestEntry:
    clean_path: str
    noise_path: str
    features_path: str | None = None
    labels: tuple[int, ...] = ()
    snr_db: float | None = None
    seed: int | None = None

    @staticmethod
    def from_json(line: str) -> "MixManifestEntry":
        raw = json.loads(line)
        known = {"clean_path", "noise_path", "features_path", "labels",
                 "snr_db", "seed"}
        unknown = set(raw) - known
        if unknown:
            raise FormatError(f"unknown manifest fields: {sorted(unknown)}")
        return MixManifestEntry(
            clean_path=raw["clean_path"],
            noise_path=raw["noise_path"],
            features_path=raw.get("features_path"),
            labels=tuple(raw.get("labels", ())),
            snr_db=raw.get("snr_db"),
            seed=raw.get("seed"),
        )

    def to_json(self) -> str:
        record = {"clean_path": self.clean_path, "noise_path": self.noise_path}
        if self.features_path is not None:
            record["features_path"] = self.features_path
        if self.labels:
            record["labels"] = list(self.labels)
        if self.snr_db is not None:
            record["snr_db"] = self.snr_db
        if self.seed is not None:
            record["seed"] = self.seed
        return json.dumps(record, sort_keys=True)


@dataclass(frozen=True)
class MixResult:
    noisy: torch.Tensor
    clean: torch.Tensor
    achieved_snr_db: float


def read_manifest(path) -> list[MixManifestEntry]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(MixManifestEntry.from_json(line))
    return entries


def write_manifest(path, entries) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(entry.to_json() + "\n")


def rms(wave: torch.Tensor) -> float:
    return float(torch.sqrt(wave.double().pow(2).mean()))


def normalize_rms(wave: torch.Tensor, target_dbfs: float = -25.0) -> torch.Tensor:
    """Scale to the target RMS level. Values may exceed [-1, 1]; no
    clipping protection is applied."""
    level = rms(wave)
    if level == 0.0:
        raise InvalidInput("cannot normalize a zero-energy signal")
    return wave * (10.0 ** (target_dbfs / 20.0) / level)


def sample_snr(rng: np.random.Generator, mean_db: float = 0.0,
               std_db: float = 5.0) -> float:
    """Mixing SNR draw: Gaussian with mean 0 dB and std 5 dB."""
    return float(rng.normal(mean_db, std_db))


def fit_noise_length(noise: torch.Tensor, target_len: int,
                     rng: np.random.Generator) -> torch.Tensor:
    """Tile short noise with a 10 ms crossfade; crop long noise at a
    seeded random offset."""
    n = noise.shape[-1]
    if n == 0:
        raise InvalidInput("empty noise signal")
    if n == target_len:
        return noise
    if n > target_len:
        start = int(rng.integers(0, n - target_len + 1))
        return noise[start:start + target_len]
    fade = min(int(CROSSFADE_SECONDS * SAMPLE_RATE), n // 2)
    out = noise.clone()
    while out.shape[-1] < target_len:
        if fade > 0:
            ramp = torch.linspace(0.0, 1.0, fade, dtype=noise.dtype)
            head = noise[:fade] * ramp + out[-fade:] * (1.0 - ramp)
            out = torch.cat([out[:-fade], head, noise[fade:]])
        else:
            out = torch.cat([out, noise])
    return out[:target_len]


def mix_at_snr(clean: torch.Tensor, noise: torch.Tensor, snr_db: float) -> MixResult:
    """Scale the noise so the clean-to-noise power ratio hits ``snr_db``."""
    if clean.shape != noise.shape:
        raise InvalidInput("clean and noise must share a length before mixing")
    rms_clean = rms(clean)
    rms_noise = rms(noise)
    if rms_clean == 0.0:
        raise InvalidInput("zero-energy clean signal")
    if rms_noise == 0.0:
        raise InvalidInput("zero-energy noise signal")
    gain = (rms_clean / rms_noise) * 10.0 ** (-snr_db / 20.0)
    scaled = gain * noise
    noisy = clean + scaled
    achieved = 10.0 * math.log10(
        (rms_clean ** 2) / float(scaled.double().pow(2).mean())
    )
    return MixResult(noisy=noisy, clean=clean, achieved_snr_db=achieved)


def write_feature_file(path, seq: VisualFeatureSequence) -> None:
    data = np.ascontiguousarray(seq.features.detach().cpu().numpy(), dtype="<f4")
    t_v, d_v = data.shape
    with open(path, "wb") as fh:
        fh.write(AVF_MAGIC)
        fh.write(struct.pack("<I", AVF_VERSION))
        fh.write(struct.pack("<II", t_v, d_v))
        fh.write(struct.pack("<B", 1 if seq.per_video else 0))
        fh.write(struct.pack("<I", round(seq.frame_rate * 1000.0)))
        fh.write(data.tobytes())


def read_feature_file(path) -> VisualFeatureSequence:
    with open(path, "rb") as fh:
        blob = fh.read()
    header = struct.calcsize("<4sIIIBI")
    if len(blob) < header:
        raise FormatError(f"{path}: truncated feature file header")
    magic, version, t_v, d_v, per_video, rate_mhz = struct.unpack_from(
        "<4sIIIBI", blob)
    if magic != AVF_MAGIC:
        raise FormatError(f"{path}: bad magic, not an AVF1 feature file")
    if version != AVF_VERSION:
        raise FormatError(f"{path}: unsupported feature format version {version}")
    expected = header + 4 * t_v * d_v
    if len(blob) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for {t_v}x{d_v} features, "
            f"got {len(blob)}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=header).reshape(t_v, d_v)
    return VisualFeatureSequence(
        features=torch.from_numpy(data.copy()),
        frame_rate=rate_mhz / 1000.0,
        per_video=bool(per_video),
    )


@dataclass(frozen=True)
class CorpusConfig:
    """Knobs of the synthetic desk-scale corpus.

    Clean signals are band-limited harmonic tones with slow amplitude
    modulation; each noise class is a fixed high-band template (tone,
    chirp, band noise, or amplitude-modulated tone) so an ideal mask is
    learnable at desk scale. Visual features are sums of per-class unit
    directions plus Gaussian noise.
    """

    num_labels: int = 5
    feature_dim: int = 32
    duration_s: float = 0.8
    frame_rate: float = 2.0
    feature_noise: float = 0.1
    normalize_dbfs: float = -25.0


def class_direction(cfg: CorpusConfig, label: int, seed: int) -> np.ndarray:
    rng = stream_rng(seed, f"class-dir:{label}")
    v = rng.standard_normal(cfg.feature_dim)
    return v / np.linalg.norm(v)


def _harmonic_clean(t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    f0 = rng.uniform(110.0, 260.0)
    env_rate = rng.uniform(1.5, 4.0)
    env_phase = rng.uniform(0.0, 2.0 * np.pi)
    env = 0.55 + 0.45 * np.sin(2.0 * np.pi * env_rate * t + env_phase)
    wave = np.zeros_like(t)
    for k in range(1, int(3800.0 // f0) + 1):
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave += np.sin(2.0 * np.pi * k * f0 * t + phase) / k
    wave *= env
    return 0.5 * wave / np.max(np.abs(wave))


def _class_template(cfg: CorpusConfig, label: int, t: np.ndarray,
                    rng: np.random.Generator, seed: int) -> np.ndarray:
    """One noise class realization; class identity fixes the band and
    kind, the entry rng only jitters phases."""
    crng = stream_rng(seed, f"class-params:{label}")
    kind = label % 4
    lo = 4200.0 + 3000.0 * crng.random()
    if kind == 0:
        freq = lo
        return np.sin(2.0 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    if kind == 1:
        f_start = lo
        f_end = min(f_start + 1500.0, 7800.0)
        sweep = f_start + (f_end - f_start) * t / t[-1]
        phase = 2.0 * np.pi * np.cumsum(sweep) / SAMPLE_RATE
        return np.sin(phase + rng.uniform(0, 2 * np.pi))
    if kind == 2:
        band_lo = min(lo, 7200.0)
        band_hi = band_lo + 600.0
        white = rng.standard_normal(t.shape[0])
        spec = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(t.shape[0], 1.0 / SAMPLE_RATE)
        spec[(freqs < band_lo) | (freqs > band_hi)] = 0.0
        shaped = np.fft.irfft(spec, t.shape[0])
        return shaped / (np.max(np.abs(shaped)) + 1e-12)
    freq = lo
    am_rate = 8.0 + 6.0 * crng.random()
    gate = 0.5 * (1.0 + np.sign(np.sin(2.0 * np.pi * am_rate * t
                                       + rng.uniform(0, 2 * np.pi))))
    return gate * np.sin(2.0 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))


def generate_entry(cfg: CorpusConfig, index: int, seed: int):
    """Deterministic (clean, noise, features, labels, snr) for one entry."""
    rng = stream_rng(seed, f"entry:{index}")
    n = int(round(cfg.duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE

    clean = _harmonic_clean(t, rng)

    n_active = int(rng.integers(1, min(3, cfg.num_labels) + 1))
    labels = tuple(sorted(rng.choice(cfg.num_labels, n_active, replace=False).tolist()))
    noise = np.zeros_like(t)
    for k in labels:
        noise += _class_template(cfg, k, t, rng, seed)
    noise /= np.max(np.abs(noise)) + 1e-12
    noise *= 0.5

    t_v = max(1, int(round(cfg.duration_s * cfg.frame_rate)))
    feats = np.zeros((t_v, cfg.feature_dim))
    for k in labels:
        feats += class_direction(cfg, k, seed)
    feats = feats + cfg.feature_noise * rng.standard_normal(feats.shape)

    snr_db = sample_snr(rng)
    return (
        torch.from_numpy(clean.astype(np.float32)),
        torch.from_numpy(noise.astype(np.float32)),
        VisualFeatureSequence(
            features=torch.from_numpy(feats.astype(np.float32)),
            frame_rate=cfg.frame_rate,
            per_video=t_v == 1,
        ),
        labels,
        snr_db,
    )


def generate_synthetic_corpus(out_dir, n: int, seed: int = 0,
                              cfg: CorpusConfig = CorpusConfig()) -> Path:
    """Write ``n`` examples plus a JSON-lines manifest; returns the
    manifest path. Byte-identical for identical (n, cfg, seed)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        clean, noise, seq, labels, snr_db = generate_entry(cfg, i, seed)
        clean_path = out / f"clean_{i:04d}.wav"
        noise_path = out / f"noise_{i:04d}.wav"
        feat_path = out / f"features_{i:04d}.avf1"
        write_wav(clean_path, clean)
        write_wav(noise_path, noise)
        write_feature_file(feat_path, seq)
        entries.append(MixManifestEntry(
            clean_path=clean_path.name,
            noise_path=noise_path.name,
            features_path=feat_path.name,
            labels=labels,
            snr_db=snr_db,
            seed=stream_seed(seed, f"mix:{i}") % (2 ** 31),
        ))
    manifest_path = out / "manifest.jsonl"
    write_manifest(manifest_path, entries)
    return manifest_path


@dataclass
class LoadedEntry:
    noisy: torch.Tensor
    clean: torch.Tensor
    features: VisualFeatureSequence | None
    labels: tuple[int, ...]
    snr_db: float
    entry: MixManifestEntry = field(repr=False)


def load_entry(entry: MixManifestEntry, base_dir, index: int = 0,
               fallback_seed: int = 0,
               normalize_dbfs: float = -25.0) -> LoadedEntry:
    """Materialize one manifest entry: read, normalize, length-fit, mix."""
    base = Path(base_dir)
    clean = normalize_rms(read_wav(base / entry.clean_path), normalize_dbfs)
    noise = normalize_rms(read_wav(base / entry.noise_path), normalize_dbfs)
    seed = entry.seed if entry.seed is not None \
        else stream_seed(fallback_seed, f"mix:{index}") % (2 ** 31)
    rng = stream_rng(seed, "length-fit")
    noise = fit_noise_length(noise, clean.shape[-1], rng)
    snr_db = entry.snr_db if entry.snr_db is not None \
        else sample_snr(stream_rng(seed, "snr"))
    mix = mix_at_snr(clean, noise, snr_db)
    features = None
    if entry.features_path is not None:
        features = read_feature_file(base / entry.features_path)
    return LoadedEntry(
        noisy=mix.noisy, clean=mix.clean, features=features,
        labels=entry.labels, snr_db=snr_db, entry=entry,
    )
