"""Command-line entry point.

Subcommands cover the whole pipeline: synthetic corpus generation,
staged training, single-file enhancement, evaluation, and the
fusion-ablation grid. Exit codes: 0 success, 2 usage or configuration
error, 3 I/O failure, 4 numeric failure (non-finite loss).
"""

import argparse
import sys
from pathlib import Path

import torch

from . import checkpoint, evaluate as eval_mod
from .config import CONFIG_KEYS, load_run_config
from .data import CorpusConfig, generate_synthetic_corpus, read_feature_file
from .errors import AvnsError, NumericError
from .model import enhance_waveform
from .signal import read_wav, write_wav
from .train import init_av_from_audio, pretrain_audio, resume_training, train_av

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class _Usage(AvnsError):
    """Command-level usage error (maps to exit 2)."""


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=96)


def _config_epilog() -> str:
    lines = ["config keys (key = default): "]
    for key, spec in CONFIG_KEYS.items():
        lines.append(f"  {key} = {spec.default}  ({spec.help})")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avns",
        description="Audio-visual noise suppression pipeline.",
        formatter_class=lambda prog: argparse.RawDescriptionHelpFormatter(
            prog, width=96),
        epilog=_config_epilog(),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser(
        "gen", help="generate a synthetic audio-visual corpus",
        formatter_class=_formatter)
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.add_argument("--n", type=int, required=True, help="number of examples")
    p_gen.add_argument("--seed", type=int, default=0, help="corpus seed (default 0)")
    p_gen.add_argument("--labels", type=int, default=5,
                       help="acoustic-event classes (default 5)")
    p_gen.add_argument("--duration", type=float, default=0.8,
                       help="clip length in seconds (default 0.8)")
    p_gen.add_argument("--feature-dim", type=int, default=32,
                       help="visual feature dimension (default 32)")

    p_train = sub.add_parser(
        "train", help="run one training stage", formatter_class=_formatter)
    p_train.add_argument("--config", help="key=value config file")
    p_train.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                         help="override a config key (repeatable, last wins)")
    p_train.add_argument("--manifest", required=True, help="JSON-lines manifest")
    p_train.add_argument("--stage", required=True,
                         choices=["audio", "av", "av-mtl"], help="training stage")
    p_train.add_argument("--init", help="audio-only checkpoint to initialize from")
    p_train.add_argument("--no-audio-init", action="store_true",
                         help="allow av stages to start from random init")
    p_train.add_argument("--ckpt", required=True, help="output checkpoint path")
    p_train.add_argument("--log", help="CSV training log path")
    p_train.add_argument("--resume", action="store_true",
                         help="continue from an existing checkpoint + sidecar")

    p_enh = sub.add_parser(
        "enhance", help="denoise one WAV file", formatter_class=_formatter)
    p_enh.add_argument("--ckpt", required=True, help="model checkpoint")
    p_enh.add_argument("--in", dest="infile", required=True, help="noisy WAV input")
    p_enh.add_argument("--features", help="AVF1 visual feature file")
    p_enh.add_argument("--out", required=True, help="enhanced WAV output")

    p_eval = sub.add_parser(
        "evaluate", help="score a checkpoint over a manifest",
        formatter_class=_formatter)
    p_eval.add_argument("--ckpt", required=True, help="model checkpoint")
    p_eval.add_argument("--manifest", required=True, help="JSON-lines manifest")
    p_eval.add_argument("--report", required=True, help="JSON report output path")
    p_eval.add_argument("--csv", help="optional per-record CSV output path")

    p_abl = sub.add_parser(
        "ablate", help="train and score a grid of fusion configurations",
        formatter_class=_formatter)
    p_abl.add_argument("--config", help="key=value config file")
    p_abl.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable, last wins)")
    p_abl.add_argument("--manifest", required=True, help="JSON-lines manifest")
    p_abl.add_argument("--init", required=True, help="audio-only checkpoint")
    p_abl.add_argument("--grid", required=True,
                       help='grid spec, e.g. "loc=A,B,C,D;method=concat;align=upsample"')
    p_abl.add_argument("--steps", type=int, default=50,
                       help="training steps per cell (default 50)")
    p_abl.add_argument("--out", required=True, help="output directory")
    return parser


def cmd_gen(args) -> int:
    cfg = CorpusConfig(num_labels=args.labels, feature_dim=args.feature_dim,
                       duration_s=args.duration)
    manifest = generate_synthetic_corpus(args.out, args.n, seed=args.seed, cfg=cfg)
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    run_cfg = load_run_config(args.config, args.set)
    cfg = run_cfg.train_config(args.stage)
    if args.stage == "audio":
        if args.init:
            raise _Usage("--init is only valid for av/av-mtl stages")
        if args.resume:
            _, rows = resume_training(cfg, args.manifest, args.ckpt, args.log)
        else:
            _, rows = pretrain_audio(cfg, args.manifest, args.ckpt, args.log)
    else:
        if args.resume:
            _, rows = resume_training(cfg, args.manifest, args.ckpt, args.log)
        elif args.init:
            model = init_av_from_audio(args.init, cfg)
            _, rows = train_av(cfg, args.manifest, model, args.ckpt, args.log)
        elif args.no_audio_init:
            from .model import NoiseSuppressor
            model = NoiseSuppressor(cfg.crn, cfg.visual, cfg.fusion, seed=cfg.seed)
            _, rows = train_av(cfg, args.manifest, model, args.ckpt, args.log)
        else:
            raise _Usage(
                f"stage {args.stage!r} needs --init AUDIO_CKPT "
                "(or --no-audio-init to start from random weights)")
    print(f"{args.ckpt} ({len(rows)} log rows)")
    return EXIT_OK


def cmd_enhance(args) -> int:
    model, stage, stft_cfg = checkpoint.load_model(args.ckpt)
    if stage == "audio" and args.features:
        raise _Usage("audio-only checkpoint does not accept --features")
    if stage != "audio" and not args.features:
        raise _Usage(f"{stage} checkpoint requires --features")
    wave = read_wav(args.infile)
    features = None
    if args.features:
        features = read_feature_file(args.features).features
    enhanced = enhance_waveform(model, wave, features, stft_cfg)
    if not torch.isfinite(enhanced).all():
        raise NumericError("enhanced output contains non-finite samples")
    write_wav(args.out, enhanced)
    print(args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, stage, stft_cfg = checkpoint.load_model(args.ckpt)
    aed_fn = None
    num_labels = None
    if stage == "av-mtl":
        aed_fn = eval_mod.model_aed_fn(model, stage)
        num_labels = model.visual_cfg.num_labels
    report = eval_mod.evaluate(
        eval_mod.model_enhancer(model, stft_cfg), args.manifest,
        stft_cfg, aed_fn=aed_fn, num_labels=num_labels)
    report.write(args.report)
    if args.csv:
        import csv as csv_mod
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            writer = csv_mod.writer(fh)
            writer.writerow(["id", "snr_in_db", "si_sdr_in", "si_sdr_out",
                             "si_sdr_improvement", "lsd", "aed_f1"])
            for r in report.records:
                writer.writerow([r.id, repr(r.snr_in_db), repr(r.si_sdr_in),
                                 repr(r.si_sdr_out), repr(r.si_sdr_improvement),
                                 repr(r.lsd),
                                 "" if r.aed_f1 is None else repr(r.aed_f1)])
    print(args.report)
    return EXIT_OK


def cmd_ablate(args) -> int:
    run_cfg = load_run_config(args.config, args.set)
    base_cfg = run_cfg.train_config("av")
    grid = eval_mod.parse_grid_spec(args.grid)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = eval_mod.ablation_grid(base_cfg, args.manifest, args.init, grid,
                                   steps=args.steps)
    eval_mod.write_grid_csv(cells, out_dir / "grid.csv")
    eval_mod.render_grid_svg(cells, out_dir / "grid.svg")
    failed = [c for c in cells if c.error]
    print(f"{out_dir} ({len(cells)} cells, {len(failed)} failed)")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"gen": cmd_gen, "train": cmd_train, "enhance": cmd_enhance,
                "evaluate": cmd_evaluate, "ablate": cmd_ablate}
    try:
        return handlers[args.command](args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except AvnsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entrypoint() -> None:
    sys.exit(main())
