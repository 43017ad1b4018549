import json
from pathlib import Path

import jsonschema
import pytest

from avns.cli import build_parser, main
from avns.config import CONFIG_KEYS, load_run_config
from avns.data import read_manifest
from avns.errors import ConfigError
from avns.evaluate import REPORT_SCHEMA
from avns.signal import read_wav

DATA = Path(__file__).parent / "data"

GEN_ARGS = ["--labels", "3", "--feature-dim", "8", "--duration", "0.1"]
TINY_SET = ["--set", "n_fft=64", "--set", "hop=32", "--set", "max_steps=2",
            "--set", "checkpoint_every=2", "--set", "enc_channels=4,8",
            "--set", "lstm_layers=1", "--set", "visual_hidden=8",
            "--set", "visual_layers=1", "--set", "num_labels=3",
            "--set", "feature_dim=8"]


def run_cli(args) -> int:
    try:
        return main(args)
    except SystemExit as exc:  # argparse usage errors
        return exc.code


@pytest.fixture(scope="module")
def cli_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_corpus")
    assert run_cli(["gen", "--out", str(out), "--n", "4", "--seed", "3",
                    *GEN_ARGS]) == 0
    return out / "manifest.jsonl"


@pytest.fixture(scope="module")
def audio_ckpt(tmp_path_factory, cli_corpus):
    out = tmp_path_factory.mktemp("cli_ckpt") / "audio.avns"
    code = run_cli(["train", "--stage", "audio", "--manifest", str(cli_corpus),
                    "--ckpt", str(out), *TINY_SET])
    assert code == 0
    return out


class TestGen:
    def test_repeated_runs_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run_cli(["gen", "--out", str(out), "--n", "2", "--seed",
                            "7", *GEN_ARGS]) == 0
        for name in sorted(p.name for p in a.iterdir()):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_zero_examples_gives_empty_manifest(self, tmp_path):
        out = tmp_path / "empty"
        assert run_cli(["gen", "--out", str(out), "--n", "0"]) == 0
        assert (out / "manifest.jsonl").read_text() == ""

    def test_unwritable_destination_is_io_error(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        code = run_cli(["gen", "--out", str(blocker / "sub"), "--n", "1"])
        assert code == 3

    def test_missing_required_flag_is_usage_error(self):
        assert run_cli(["gen", "--n", "1"]) == 2


class TestTrain:
    def test_av_without_init_is_usage_error(self, cli_corpus, tmp_path):
        code = run_cli(["train", "--stage", "av", "--manifest",
                        str(cli_corpus), "--ckpt", str(tmp_path / "c.avns"),
                        *TINY_SET])
        assert code == 2

    def test_audio_with_init_is_usage_error(self, cli_corpus, tmp_path,
                                            audio_ckpt):
        code = run_cli(["train", "--stage", "audio", "--init", str(audio_ckpt),
                        "--manifest", str(cli_corpus),
                        "--ckpt", str(tmp_path / "c.avns"), *TINY_SET])
        assert code == 2

    def test_av_stage_with_init_succeeds(self, cli_corpus, tmp_path,
                                         audio_ckpt):
        ckpt = tmp_path / "av.avns"
        log = tmp_path / "av.csv"
        code = run_cli(["train", "--stage", "av", "--init", str(audio_ckpt),
                        "--manifest", str(cli_corpus), "--ckpt", str(ckpt),
                        "--log", str(log), *TINY_SET])
        assert code == 0
        assert ckpt.exists() and log.exists()
        header = log.read_text().splitlines()[0]
        assert header == "step,loss,l1,wstft,sisdr,aed"

    def test_no_audio_init_override(self, cli_corpus, tmp_path):
        code = run_cli(["train", "--stage", "av-mtl", "--no-audio-init",
                        "--manifest", str(cli_corpus),
                        "--ckpt", str(tmp_path / "scratch.avns"), *TINY_SET])
        assert code == 0

    def test_audio_stage_rejects_fusion_keys(self, cli_corpus, tmp_path):
        code = run_cli(["train", "--stage", "audio", "--manifest",
                        str(cli_corpus), "--ckpt", str(tmp_path / "c.avns"),
                        *TINY_SET, "--set", "fusion_location=D"])
        assert code == 2

    def test_unknown_config_key_rejected(self, cli_corpus, tmp_path):
        code = run_cli(["train", "--stage", "audio", "--manifest",
                        str(cli_corpus), "--ckpt", str(tmp_path / "c.avns"),
                        *TINY_SET, "--set", "bogus=1"])
        assert code == 2

    def test_mtl_alpha2_zero_logs_match_av_stage(self, cli_corpus, tmp_path,
                                                 audio_ckpt):
        logs = []
        for stage in ("av", "av-mtl"):
            log = tmp_path / f"{stage}.csv"
            code = run_cli(["train", "--stage", stage, "--init",
                            str(audio_ckpt), "--manifest", str(cli_corpus),
                            "--ckpt", str(tmp_path / f"{stage}.avns"),
                            "--log", str(log), *TINY_SET,
                            "--set", "alpha2=0", "--set", "max_steps=5",
                            "--set", "checkpoint_every=1"])
            assert code == 0
            logs.append(log.read_bytes())
        assert logs[0] == logs[1]

    def test_exploding_lr_exits_numeric(self, cli_corpus, tmp_path):
        code = run_cli(["train", "--stage", "audio", "--manifest",
                        str(cli_corpus), "--ckpt", str(tmp_path / "c.avns"),
                        *TINY_SET, "--set", "lr=1e30", "--set", "max_steps=8"])
        assert code == 4

    def test_config_file_with_comments_and_override(self, cli_corpus, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(
            "# tiny run\nn_fft = 64\nhop = 32  # matches 33 bins\n"
            "enc_channels = 4,8\nlstm_layers = 1\n"
            "max_steps = 2\ncheckpoint_every = 2\n")
        ckpt = tmp_path / "c.avns"
        code = run_cli(["train", "--stage", "audio", "--config", str(cfg),
                        "--manifest", str(cli_corpus), "--ckpt", str(ckpt),
                        "--set", "max_steps=1"])
        assert code == 0


class TestEnhance:
    def test_output_length_equals_input(self, cli_corpus, tmp_path, audio_ckpt):
        entries = read_manifest(cli_corpus)
        noisy_in = Path(cli_corpus).parent / entries[0].clean_path
        out = tmp_path / "enh.wav"
        code = run_cli(["enhance", "--ckpt", str(audio_ckpt), "--in",
                        str(noisy_in), "--out", str(out)])
        assert code == 0
        assert read_wav(out).shape == read_wav(noisy_in).shape

    def test_audio_checkpoint_rejects_features(self, cli_corpus, tmp_path,
                                               audio_ckpt):
        entries = read_manifest(cli_corpus)
        base = Path(cli_corpus).parent
        code = run_cli(["enhance", "--ckpt", str(audio_ckpt),
                        "--in", str(base / entries[0].clean_path),
                        "--features", str(base / entries[0].features_path),
                        "--out", str(tmp_path / "o.wav")])
        assert code == 2

    def test_av_checkpoint_requires_features(self, cli_corpus, tmp_path,
                                             audio_ckpt):
        av_ckpt = tmp_path / "av.avns"
        assert run_cli(["train", "--stage", "av", "--init", str(audio_ckpt),
                        "--manifest", str(cli_corpus), "--ckpt", str(av_ckpt),
                        *TINY_SET]) == 0
        entries = read_manifest(cli_corpus)
        base = Path(cli_corpus).parent
        code = run_cli(["enhance", "--ckpt", str(av_ckpt),
                        "--in", str(base / entries[0].clean_path),
                        "--out", str(tmp_path / "o.wav")])
        assert code == 2
        code = run_cli(["enhance", "--ckpt", str(av_ckpt),
                        "--in", str(base / entries[0].clean_path),
                        "--features", str(base / entries[0].features_path),
                        "--out", str(tmp_path / "o.wav")])
        assert code == 0


class TestEvaluate:
    def test_report_deterministic_and_valid(self, cli_corpus, tmp_path,
                                            audio_ckpt):
        reports = []
        for name in ("r1.json", "r2.json"):
            path = tmp_path / name
            code = run_cli(["evaluate", "--ckpt", str(audio_ckpt),
                            "--manifest", str(cli_corpus),
                            "--report", str(path),
                            "--csv", str(tmp_path / (name + ".csv"))])
            assert code == 0
            reports.append(path.read_bytes())
        assert reports[0] == reports[1]
        payload = json.loads(reports[0])
        jsonschema.validate(payload, REPORT_SCHEMA)
        assert len(payload["records"]) == 4
        csv_text = (tmp_path / "r1.json.csv").read_text()
        assert csv_text.splitlines()[0].startswith("id,snr_in_db")


class TestAblate:
    def test_grid_runs_and_counts_cells(self, cli_corpus, tmp_path, audio_ckpt):
        out = tmp_path / "grid"
        code = run_cli(["ablate", "--manifest", str(cli_corpus),
                        "--init", str(audio_ckpt),
                        "--grid", "loc=C,D;method=add,concat;align=upsample",
                        "--steps", "1", "--out", str(out), *TINY_SET])
        assert code == 0
        rows = (out / "grid.csv").read_text().splitlines()
        assert len(rows) == 5  # header + 4 cells
        assert (out / "grid.svg").read_text().startswith("<svg")

    def test_malformed_grid_is_usage_error(self, cli_corpus, tmp_path,
                                           audio_ckpt):
        code = run_cli(["ablate", "--manifest", str(cli_corpus),
                        "--init", str(audio_ckpt), "--grid", "bogus=A",
                        "--out", str(tmp_path / "g"), *TINY_SET])
        assert code == 2


class TestHelp:
    def test_help_matches_golden_file(self):
        parser = build_parser()
        parts = [parser.format_help()]
        for name, sub in parser._subparsers._group_actions[0].choices.items():
            parts.append(f"\n===== avns {name} =====\n")
            parts.append(sub.format_help())
        assert "".join(parts) == (DATA / "cli_help.txt").read_text()

    def test_every_config_key_documented(self):
        help_text = build_parser().format_help()
        for key in CONFIG_KEYS:
            assert key in help_text


class TestRunConfig:
    def test_defaults_resolve(self):
        cfg = load_run_config()
        assert cfg["n_fft"] == 320 and cfg["lambda2"] == 22.62
        assert cfg.explicit == frozenset()

    def test_last_override_wins(self):
        cfg = load_run_config(None, ["lr=0.5", "lr=0.25"])
        assert cfg["lr"] == 0.25

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            load_run_config(None, ["nope=1"])

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            load_run_config(None, ["max_steps=abc"])
