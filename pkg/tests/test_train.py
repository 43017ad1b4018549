import csv
from dataclasses import replace

import numpy as np
import pytest
import torch

from avns.checkpoint import load_model, load_tensors, save_tensors
from avns.errors import ConfigError, InitError, NumericError
from avns.fusion import FusionConfig
from avns.model import NoiseSuppressor
from avns.seeding import stream_rng
from avns.train import (Dataset, TrainConfig, _batch_losses, corpus_loss,
                        init_av_from_audio, pretrain_audio, resume_training,
                        train_av, train_loop)

from conftest import TINY_STFT, tiny_crn_cfg, tiny_train_cfg


def params_equal(a: torch.nn.Module, b: torch.nn.Module) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return set(sa) == set(sb) and all(torch.equal(sa[k], sb[k]) for k in sa)


class TestConfig:
    def test_audio_stage_forbids_fusion(self):
        with pytest.raises(ConfigError):
            tiny_train_cfg("audio", fusion=FusionConfig())

    def test_av_stage_requires_fusion_and_visual(self):
        with pytest.raises(ConfigError):
            TrainConfig(stage="av", stft=TINY_STFT, crn=tiny_crn_cfg())

    def test_positive_sizes_required(self):
        with pytest.raises(ConfigError):
            tiny_train_cfg("audio", lr=0.0)
        with pytest.raises(ConfigError):
            tiny_train_cfg("audio", batch_size=0)


class TestAudioPretrain:
    def test_zero_steps_checkpoint_equals_init(self, tiny_corpus, tmp_path):
        cfg = tiny_train_cfg("audio", max_steps=0)
        ckpt = tmp_path / "a.avns"
        trained, rows = pretrain_audio(cfg, tiny_corpus, ckpt_path=ckpt)
        fresh = NoiseSuppressor(cfg.crn, seed=cfg.seed)
        assert params_equal(trained, fresh)
        loaded, _, _ = load_model(ckpt)
        assert params_equal(loaded, fresh)

    def test_deterministic_loss_curves(self, tiny_corpus):
        cfg = tiny_train_cfg("audio", max_steps=6, checkpoint_every=2)
        m1, rows1 = pretrain_audio(cfg, tiny_corpus)
        m2, rows2 = pretrain_audio(cfg, tiny_corpus)
        assert rows1 == rows2
        assert params_equal(m1, m2)

    def test_resume_matches_uninterrupted_run(self, tiny_corpus, tmp_path):
        full_cfg = tiny_train_cfg("audio", max_steps=12, checkpoint_every=6)
        m_full, _ = pretrain_audio(full_cfg, tiny_corpus)

        half_cfg = replace(full_cfg, max_steps=6)
        ckpt = tmp_path / "half.avns"
        pretrain_audio(half_cfg, tiny_corpus, ckpt_path=ckpt)
        m_resumed, _ = resume_training(full_cfg, tiny_corpus, ckpt)
        assert params_equal(m_full, m_resumed)

    def test_csv_log_written(self, tiny_corpus, tmp_path):
        cfg = tiny_train_cfg("audio", max_steps=4, checkpoint_every=2)
        log = tmp_path / "log.csv"
        pretrain_audio(cfg, tiny_corpus, ckpt_path=tmp_path / "c.avns",
                       log_path=log)
        with open(log) as fh:
            rows = list(csv.DictReader(fh))
        assert [r["step"] for r in rows] == ["0", "2", "4"]
        assert all(set(r) == {"step", "loss", "l1", "wstft", "sisdr", "aed"}
                   for r in rows)

    def test_nan_aborts_with_numeric_error(self, tiny_corpus):
        cfg = tiny_train_cfg("audio", max_steps=3)
        model = NoiseSuppressor(cfg.crn, seed=0)
        with torch.no_grad():
            model.crn.core.proj.weight[0, 0] = float("nan")
        ds = Dataset(tiny_corpus)
        with pytest.raises(NumericError):
            train_loop(model, cfg, ds)


class TestAvInit:
    def _audio_ckpt(self, tiny_corpus, tmp_path, steps=2):
        cfg = tiny_train_cfg("audio", max_steps=steps)
        ckpt = tmp_path / "audio.avns"
        pretrain_audio(cfg, tiny_corpus, ckpt_path=ckpt)
        return ckpt

    def test_av_forward_equals_audio_at_init(self, tiny_corpus, tmp_path):
        ckpt = self._audio_ckpt(tiny_corpus, tmp_path)
        audio, _, _ = load_model(ckpt)
        audio.eval()
        rng = np.random.default_rng(0)
        for loc in "ABCD":
            cfg = tiny_train_cfg("av", fusion=FusionConfig(location=loc))
            av = init_av_from_audio(ckpt, cfg)
            av.eval()
            for _ in range(3):
                x = torch.from_numpy(
                    rng.standard_normal((1, 2, 9, 33)).astype(np.float32))
                feats = torch.from_numpy(
                    rng.standard_normal((1, 3, 8)).astype(np.float32))
                assert torch.equal(av(x, feats).mask, audio(x).mask)

    def test_missing_tensor_raises_init_error(self, tiny_corpus, tmp_path):
        ckpt = self._audio_ckpt(tiny_corpus, tmp_path)
        tensors = load_tensors(ckpt)
        del tensors["crn.encoder.0.conv.weight"]
        broken = tmp_path / "broken.avns"
        save_tensors(broken, tensors)
        with pytest.raises(InitError, match="crn.encoder.0.conv.weight"):
            init_av_from_audio(broken, tiny_train_cfg("av"))

    def test_location_change_keeps_crn_weights(self, tiny_corpus, tmp_path):
        ckpt = self._audio_ckpt(tiny_corpus, tmp_path)
        states = []
        for loc in ("A", "D"):
            cfg = tiny_train_cfg("av", fusion=FusionConfig(location=loc))
            av = init_av_from_audio(ckpt, cfg)
            states.append({k: v.clone() for k, v in av.state_dict().items()
                           if k.startswith("crn.")})
        assert set(states[0]) == set(states[1])
        assert all(torch.equal(states[0][k], states[1][k]) for k in states[0])

    def test_step0_av_loss_equals_audio_loss_on_same_batch(self, tiny_corpus,
                                                           tmp_path):
        ckpt = self._audio_ckpt(tiny_corpus, tmp_path, steps=4)
        audio, _, _ = load_model(ckpt)
        av_cfg = tiny_train_cfg("av", max_steps=1)
        av = init_av_from_audio(ckpt, av_cfg)
        ds = Dataset(tiny_corpus, num_labels=3, fallback_seed=av_cfg.seed)
        batch = ds.sample_batch(stream_rng(av_cfg.seed, "batch:0"),
                                av_cfg.batch_size)
        noisy, clean, feats, targets = ds.batch_tensors(batch, with_features=True)
        audio.eval(), av.eval()
        with torch.no_grad():
            _, m_audio = _batch_losses(audio, tiny_train_cfg("audio"), noisy,
                                       clean, None, None)
            _, m_av = _batch_losses(av, av_cfg, noisy, clean, feats, targets)
        assert m_av.loss == m_audio.loss


class TestAvTraining:
    def test_full_freeze_keeps_visual_bit_identical(self, tiny_corpus):
        cfg = tiny_train_cfg("av", max_steps=6, freeze_visual_steps=6)
        model = NoiseSuppressor(cfg.crn, cfg.visual, cfg.fusion, seed=1)
        before = {k: v.clone() for k, v in model.visual.state_dict().items()}
        model, _ = train_av(cfg, tiny_corpus, model)
        after = model.visual.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_unfrozen_visual_moves(self, tiny_corpus):
        cfg = tiny_train_cfg("av", max_steps=6, freeze_visual_steps=0)
        model = NoiseSuppressor(cfg.crn, cfg.visual, cfg.fusion, seed=1)
        before = {k: v.clone() for k, v in model.visual.state_dict().items()}
        model, _ = train_av(cfg, tiny_corpus, model)
        after = model.visual.state_dict()
        assert any(not torch.equal(before[k], after[k]) for k in before)

    def test_partial_freeze_then_finetune(self, tiny_corpus):
        cfg = tiny_train_cfg("av", max_steps=6, freeze_visual_steps=3,
                             checkpoint_every=1)
        model = NoiseSuppressor(cfg.crn, cfg.visual, cfg.fusion, seed=1)
        model, _ = train_av(cfg, tiny_corpus, model)
        # visual moved only after the boundary; crn moved throughout
        fresh = NoiseSuppressor(cfg.crn, cfg.visual, cfg.fusion, seed=1)
        assert not params_equal(model.visual, fresh.visual)

    def test_mtl_with_zero_alpha2_matches_av_trajectory(self, tiny_corpus):
        from avns.losses import LossWeights
        weights = LossWeights(alpha2=0.0)
        steps = 50
        av_cfg = tiny_train_cfg("av", max_steps=steps, checkpoint_every=1,
                                loss_weights=weights)
        mtl_cfg = tiny_train_cfg("av-mtl", max_steps=steps, checkpoint_every=1,
                                 loss_weights=weights)
        m_av = NoiseSuppressor(av_cfg.crn, av_cfg.visual, av_cfg.fusion, seed=9)
        m_mtl = NoiseSuppressor(mtl_cfg.crn, mtl_cfg.visual, mtl_cfg.fusion, seed=9)
        m_av, rows_av = train_av(av_cfg, tiny_corpus, m_av)
        m_mtl, rows_mtl = train_av(mtl_cfg, tiny_corpus, m_mtl)
        assert rows_av == rows_mtl
        assert params_equal(m_av, m_mtl)

    def test_av_checkpoint_records_stage(self, tiny_corpus, tmp_path):
        cfg = tiny_train_cfg("av-mtl", max_steps=2)
        model = NoiseSuppressor(cfg.crn, cfg.visual, cfg.fusion, seed=1)
        ckpt = tmp_path / "mtl.avns"
        train_av(cfg, tiny_corpus, model, ckpt_path=ckpt)
        _, stage, _ = load_model(ckpt)
        assert stage == "av-mtl"


class TestCorpusLoss:
    def test_eval_mode_and_restores_training_flag(self, tiny_corpus):
        cfg = tiny_train_cfg("audio")
        model = NoiseSuppressor(cfg.crn, seed=0)
        model.train()
        ds = Dataset(tiny_corpus)
        a = corpus_loss(model, cfg, ds)
        b = corpus_loss(model, cfg, ds)
        assert model.training
        assert a.loss == b.loss
