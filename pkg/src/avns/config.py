"""Flat key=value run configuration.

Files are UTF-8 text, one ``key = value`` pair per line, ``#`` comments
allowed. Unknown keys are rejected. Command-line ``--set key=value``
overrides file values (last occurrence wins).
"""

from dataclasses import dataclass

from .crn import CrnConfig
from .errors import ConfigError
from .fusion import ALIGNMENTS, LOCATIONS, METHODS, FusionConfig
from .losses import LossWeights
from .signal import StftConfig
from .train import TrainConfig
from .visual import VisualConfig


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _choice(options):
    def parse(text: str):
        if text not in options:
            raise ValueError(f"expected one of {options}, got {text!r}")
        return text
    return parse


@dataclass(frozen=True)
class ConfigKey:
    default: object
    parse: callable
    help: str


# Every run-config key with its default; surfaced verbatim in --help.
CONFIG_KEYS: dict[str, ConfigKey] = {
    "n_fft": ConfigKey(320, int, "STFT size in samples"),
    "hop": ConfigKey(160, int, "STFT hop in samples"),
    "enc_channels": ConfigKey((16, 32, 64, 76, 98), _parse_ints,
                              "encoder channel ladder, one entry per block"),
    "lstm_layers": ConfigKey(4, int, "recurrent core depth"),
    "lr": ConfigKey(1e-3, float, "optimizer learning rate"),
    "beta1": ConfigKey(0.9, float, "first moment decay"),
    "beta2": ConfigKey(0.999, float, "second moment decay"),
    "batch_size": ConfigKey(2, int, "examples per optimizer step"),
    "max_steps": ConfigKey(300, int, "optimizer steps to run"),
    "freeze_visual_steps": ConfigKey(0, int,
                                     "steps with the visual encoder frozen"),
    "seed": ConfigKey(0, int, "master seed for all random streams"),
    "checkpoint_every": ConfigKey(50, int, "steps between checkpoints/log rows"),
    "grad_clip": ConfigKey(5.0, float, "global gradient-norm clip"),
    "lambda1": ConfigKey(1.0, float, "time-domain L1 weight"),
    "lambda2": ConfigKey(22.62, float, "weighted STFT loss weight"),
    "lambda3": ConfigKey(0.001, float, "negative SI-SDR weight"),
    "band_weights": ConfigKey((0.1, 1.0, 1.5, 1.5), _parse_floats,
                              "4 sub-band weights, low to high"),
    "alpha1": ConfigKey(1.0, float, "enhancement task weight"),
    "alpha2": ConfigKey(50.0, float, "acoustic-event task weight"),
    "epsilon": ConfigKey(1e-8, float, "SI-SDR stabilizer"),
    "fusion_location": ConfigKey("C", _choice(LOCATIONS),
                                 "tap fed by visual features (A|B|C|D)"),
    "fusion_align": ConfigKey("upsample", _choice(ALIGNMENTS),
                              "temporal alignment (upsample|attention)"),
    "fusion_method": ConfigKey("add", _choice(METHODS),
                               "combination method (add|concat)"),
    "attention_heads": ConfigKey(4, int, "attention heads"),
    "attention_dim": ConfigKey(128, int, "attention model dimension"),
    "visual_layers": ConfigKey(2, int, "visual recurrent layers"),
    "visual_hidden": ConfigKey(128, int, "visual recurrent hidden size"),
    "num_labels": ConfigKey(5, int, "acoustic-event label count"),
    "feature_dim": ConfigKey(32, int, "visual feature dimension"),
}

FUSION_KEYS = ("fusion_location", "fusion_align", "fusion_method",
               "attention_heads", "attention_dim")


@dataclass(frozen=True)
class RunConfig:
    values: dict
    explicit: frozenset

    def __getitem__(self, key):
        return self.values[key]

    def stft_config(self) -> StftConfig:
        return StftConfig(n_fft=self["n_fft"], hop=self["hop"])

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda1=self["lambda1"], lambda2=self["lambda2"],
            lambda3=self["lambda3"], band_weights=tuple(self["band_weights"]),
            alpha1=self["alpha1"], alpha2=self["alpha2"],
            epsilon=self["epsilon"],
        )

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(
            location=self["fusion_location"], align=self["fusion_align"],
            method=self["fusion_method"],
            attention_heads=self["attention_heads"],
            attention_dim=self["attention_dim"],
        )

    def visual_config(self) -> VisualConfig:
        return VisualConfig(
            feature_dim=self["feature_dim"], num_labels=self["num_labels"],
            lstm_layers=self["visual_layers"], lstm_hidden=self["visual_hidden"],
        )

    def train_config(self, stage: str) -> "TrainConfig":
        if stage == "audio":
            used = [k for k in FUSION_KEYS if k in self.explicit]
            if used:
                raise ConfigError(
                    f"audio stage forbids fusion keys: {', '.join(used)}")
            visual = fusion = None
        else:
            visual = self.visual_config()
            fusion = self.fusion_config()
        return TrainConfig(
            stage=stage, max_steps=self["max_steps"],
            batch_size=self["batch_size"], lr=self["lr"],
            betas=(self["beta1"], self["beta2"]),
            freeze_visual_steps=self["freeze_visual_steps"],
            seed=self["seed"], checkpoint_every=self["checkpoint_every"],
            grad_clip=self["grad_clip"], loss_weights=self.loss_weights(),
            stft=self.stft_config(),
            crn=CrnConfig(freq_bins=self["n_fft"] // 2 + 1,
                          enc_channels=tuple(self["enc_channels"]),
                          lstm_layers=self["lstm_layers"]),
            visual=visual, fusion=fusion,
        )


def parse_assignment(line: str) -> tuple[str, str]:
    if "=" not in line:
        raise ConfigError(f"expected key=value, got {line!r}")
    key, _, value = line.partition("=")
    return key.strip(), value.strip()


def load_run_config(path=None, overrides=()) -> RunConfig:
    """Resolve defaults, then the file, then --set overrides in order."""
    values = {key: spec.default for key, spec in CONFIG_KEYS.items()}
    explicit = set()
    pairs = []
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                try:
                    pairs.append(parse_assignment(line))
                except ConfigError as exc:
                    raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    for item in overrides:
        pairs.append(parse_assignment(item))
    for key, raw_value in pairs:
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            values[key] = CONFIG_KEYS[key].parse(raw_value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from exc
        explicit.add(key)
    return RunConfig(values=values, explicit=frozenset(explicit))
