import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from sldetect import models, nnsub, train
from sldetect.data import ClipSet
from sldetect.models import ModelConfig
from sldetect.train import CheckpointMismatch, DivergedLoss, EpochRecord, RunLog, TrainConfig, cosine_lr

torch.set_num_threads(1)


def toy_audio(n=24, seed=0):
    """Class-dependent tones with noise: separable, cheap to train on."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 3
    t = np.arange(19520) / 16000
    x = np.stack([np.sin(2 * np.pi * (200 + 300 * k) * t) + 0.3 * rng.standard_normal(t.size) for k in y])
    return torch.tensor(x[:, None], dtype=torch.float32), y.astype(np.int64)


def toy_clips(n=12, seed=0):
    x, y = toy_audio(n, seed)
    v = torch.randn(n, 1, 30, 96, 96, generator=torch.Generator().manual_seed(seed))
    return ClipSet(y, audio=x, video=v)


def state(module, prefix=""):
    return {k: v for k, v in nnsub.state_tensors(module).items() if k.startswith(prefix)}


def same(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


# --------------------------------------------------------------------------- schedule


def test_cosine_endpoints():
    assert abs(cosine_lr(0, 80) - 3e-6) <= 1e-12
    assert abs(cosine_lr(80, 80)) <= 1e-12
    assert abs(cosine_lr(40, 80) - 1.5e-6) <= 1e-12


@given(st.integers(1, 200), st.floats(1e-7, 1.0), st.floats(0, 0.99))
def test_cosine_non_increasing_and_bounded(total, lr0, frac):
    lr_min = lr0 * frac
    lrs = [cosine_lr(t, total, lr0, lr_min) for t in range(total + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert lrs[0] == pytest.approx(lr0, abs=1e-15) and lrs[-1] == pytest.approx(lr_min, abs=1e-15)


def test_cosine_rejects_out_of_range():
    with pytest.raises(ValueError):
        cosine_lr(81, 80)


def test_balanced_weights_equalize_classes():
    y = np.array([0] * 2 + [1] * 6 + [2] * 12)
    w = train.balanced_weights(y)
    mass = [w[y == c].sum() for c in range(3)]
    assert np.allclose(mass, mass[0])


# --------------------------------------------------------------------------- config


@pytest.mark.parametrize(
    "kwargs",
    [
        {"modality": "text"},
        {"regime": "partial"},
        {"regime": "full-ft"},
        {"lr0": 0.0},
        {"lr0": 1e-3, "lr_min": 1e-2},
        {"epochs": 0},
        {"batch_size": 0},
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_fusion_config_defaults():
    cfg = TrainConfig.fusion()
    assert cfg.modality == "fusion" and cfg.epochs == 30 and cfg.lr0 == 3e-6


def test_run_log_best_epoch_is_earliest_maximum():
    log = RunLog([EpochRecord(i, 0.1, 1.0, 1.0, u) for i, u in enumerate([0.4, 0.7, 0.5, 0.7])])
    assert log.best_epoch == 1
    assert RunLog.from_jsonl(log.to_jsonl()).records == log.records


# --------------------------------------------------------------------------- training steps


def test_steps_per_epoch(monkeypatch):
    calls = []
    real = train.sample_batch
    monkeypatch.setattr(train, "sample_batch", lambda *a: calls.append(1) or real(*a))
    x, y = toy_audio(33)
    net = models.build_audio_net(ModelConfig(), seed=0)
    train.train_epoch(net, x, y, np.ones(33), np.random.default_rng(0), 1e-3, batch_size=16)
    assert len(calls) == math.ceil(33 / 16)


def test_fit_logs_schedule_and_restores_best():
    x, y = toy_audio(18)
    net = models.build_audio_net(ModelConfig(), seed=0)
    res = train.fit(net, TrainConfig(epochs=3, lr0=0.01, seed=0), x, y, x, y)
    assert [r.lr for r in res.log.records] == [cosine_lr(e, 3, 0.01) for e in range(3)]
    assert same(state(net), res.best_state)


def test_last_layers_ft_leaves_backbone_bit_identical(tmp_path):
    cfg = ModelConfig()
    pre = models.build_audio_net(cfg, seed=1)
    path = tmp_path / "pre.slck"
    models.save_model(path, pre, "audio", {"modality": "audio", "model": cfg.to_dict()})
    net = models.build_audio_net(cfg, seed=2)
    clips = toy_clips(12)
    train.train_modality(TrainConfig(epochs=2, lr0=0.05, regime="last-layers-ft", pretrained_checkpoint=str(path)),
                         net, clips, clips)
    for part in ("frontend.", "backbone."):
        assert same(state(net, part), state(pre, part)), part
    assert not same(state(net, "mstcn."), state(pre, "mstcn."))


def test_full_ft_starts_from_pretrained_body(tmp_path):
    cfg = ModelConfig()
    pre = models.build_audio_net(cfg, seed=1)
    path = tmp_path / "pre.slck"
    models.save_model(path, pre, "audio")
    net = models.build_audio_net(cfg, seed=2)
    head_before = state(net, "head.")
    train.apply_regime(net, TrainConfig(regime="full-ft", pretrained_checkpoint=str(path)))
    assert same(state(net, "backbone."), state(pre, "backbone."))
    assert same(state(net, "head."), head_before)
    assert nnsub.count_parameters(net, trainable_only=True) == nnsub.count_parameters(net)


def test_regime_with_wrong_checkpoint(tmp_path):
    path = tmp_path / "v.slck"
    models.save_model(path, models.build_video_net(ModelConfig()), "video")
    with pytest.raises(CheckpointMismatch):
        train.apply_regime(models.build_audio_net(ModelConfig()),
                           TrainConfig(regime="full-ft", pretrained_checkpoint=str(path)))


def test_fusion_leaves_modalities_bit_identical():
    cfg = ModelConfig()
    audio, video = models.build_audio_net(cfg, seed=0), models.build_video_net(cfg, seed=0)
    a0, v0 = state(audio), state(video)
    clips = toy_clips(9)
    net, res = train.train_fusion(TrainConfig.fusion(epochs=5, lr0=0.1), audio, video, clips, clips)
    assert same(state(audio), a0) and same(state(video), v0)
    assert len(res.log.records) == 5
    out = train.predict_clips(net, clips)
    assert out.logits.shape == (9, 3) and out.embedding.shape == (9, 6)


def test_training_is_deterministic(tmp_path):
    runs = []
    for k in range(2):
        x, y = toy_audio(18)
        net = models.build_audio_net(ModelConfig(), seed=4)
        cfg = TrainConfig(epochs=2, lr0=0.01, seed=4)
        res = train.fit(net, cfg, x, y, x, y)
        paths = train.write_run(tmp_path / str(k), cfg, res.log, net, "audio", {"modality": "audio"})
        runs.append((res.log.to_jsonl(), paths["checkpoint"].read_bytes(), paths["card"].read_bytes()))
    assert runs[0] == runs[1]


def test_diverged_loss_reports_position_and_state():
    x, y = toy_audio(6)
    net = models.build_audio_net(ModelConfig(), seed=0)
    x[0, 0, 0] = float("nan")
    with pytest.raises(DivergedLoss) as info:
        train.fit(net, TrainConfig(epochs=2, lr0=0.01, batch_size=6), x, y, x, y)
    assert info.value.epoch == 0 and info.value.step == 0
    assert set(info.value.last_state) == set(nnsub.state_tensors(net))


# --------------------------------------------------------------------------- proxy pretraining


def test_proxy_loss_decreases():
    from sldetect.synth import gen_proxy_task

    x, y = gen_proxy_task("audio", n_classes=4, n_per_class=6, seed=0)
    net = models.build_audio_net(ModelConfig(n_classes=4), seed=0)
    res = train.proxy_pretrain(net, torch.from_numpy(x), y, TrainConfig(epochs=6, lr0=0.02, batch_size=8))
    assert len(res.losses) == 6 and res.losses[-1] < res.losses[0]


def test_proxy_head_size_must_match():
    x, y = toy_audio(8)
    y = np.arange(8) % 5
    with pytest.raises(ValueError):
        train.proxy_pretrain(models.build_audio_net(ModelConfig()), x, y, TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train.proxy_pretrain(models.build_audio_net(ModelConfig()), x, np.arange(8) % 3, TrainConfig(epochs=1))


# --------------------------------------------------------------------------- checkpoints


def test_load_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig()
    net = models.build_video_net(cfg, seed=3).eval()
    path = tmp_path / "v.slck"
    models.save_model(path, net, "video", {"modality": "video", "model": cfg.to_dict(), "seed": 3})
    back, card = train.load_checkpoint(path)
    assert card["modality"] == "video" and same(state(back), state(net))


def test_load_checkpoint_without_card(tmp_path):
    with pytest.raises(CheckpointMismatch):
        train.load_checkpoint(tmp_path / "missing.slck")
