import numpy as np
import pytest

from conftest import toy_utterances
from tonetts import autodiff as ad
from tonetts.errors import DataError
from tonetts.model import AcousticModel, ModelConfig
from tonetts.trainer import (
    LORA_FROZEN, Adam, Checkpoint, CorruptCheckpoint, DatasetEmpty, TrainConfig, Trainer, Utterance,
    clip_grad_norm, evaluate_mel_mse, lora_adapt, lr_at, make_batch, sub_seed, train,
)

SMALL = dict(d_model=16, n_heads=2, n_blocks=1, conv_filter=16, duration_filter=8)


@pytest.fixture(scope="module")
def utts():
    return toy_utterances({"a": "ni3 hao3", "b": "ma1 ma2"})


def test_learning_rate_schedule():
    assert lr_at(4000, 256, 4000) == pytest.approx(9.8821e-4, abs=1e-7)
    peak = lr_at(4000, 256, 4000)
    assert lr_at(3999, 256, 4000) < peak and lr_at(4001, 256, 4000) < peak
    assert lr_at(2, 256, 4000) == pytest.approx(2 * lr_at(1, 256, 4000))
    with pytest.raises(ValueError):
        lr_at(0, 256, 4000)


def test_adam_first_step_moves_by_lr():
    ps = ad.ParameterSet()
    ps.add("g.w", np.array([1.0, -1.0, 2.0]))
    ps.add("g.frozen", np.zeros(2))
    ps["g.frozen"].trainable = False
    ps["g.w"].grad = np.array([0.5, -3.0, 1e-3], dtype=np.float32)
    opt = Adam(ps)
    opt.step(0.01)
    np.testing.assert_allclose(ps["g.w"].data, [0.99, -0.99, 1.99], rtol=1e-5)
    assert "g.frozen" not in opt.state
    assert opt.state["g.w"][2] == 1


def test_clip_grad_norm():
    ps = ad.ParameterSet()
    ps.add("a.w", np.zeros(2))
    ps["a.w"].grad = np.array([3.0, 4.0], dtype=np.float32)
    assert clip_grad_norm(ps, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(ps["a.w"].grad, [0.6, 0.8], rtol=1e-5)
    ps["a.w"].grad = np.array([0.3, 0.4], dtype=np.float32)
    clip_grad_norm(ps, 1.0)
    np.testing.assert_allclose(ps["a.w"].grad, [0.3, 0.4])


def test_sub_seed_is_stable_and_distinct():
    assert sub_seed(0, "init") == sub_seed(0, "init")
    assert len({sub_seed(0, "init"), sub_seed(0, "dropout"), sub_seed(1, "init")}) == 3


def test_config_validation():
    for bad in (dict(mode="x"), dict(fusion_stage=5), dict(steps=0), dict(batch_size=0), dict(warmup_steps=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 1})
    cfg = TrainConfig(steps=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_utterance_validation(utts):
    u = utts[0]
    with pytest.raises(DataError):
        Utterance("x", u.phonemes, u.tones[:-1], u.durations, u.mel)
    with pytest.raises(DataError):
        Utterance("x", u.phonemes, u.tones, u.durations, u.mel[:-1])


def test_empty_dataset():
    with pytest.raises(DatasetEmpty):
        train([], TrainConfig(steps=1), ModelConfig(**SMALL))


def run_steps(utts, n=10):
    model = AcousticModel(ModelConfig(**SMALL), seed=1)
    trainer = Trainer(model, TrainConfig(steps=n, warmup_steps=10, seed=3))
    batch = make_batch(utts)
    results = [trainer.train_step(batch) for _ in range(n)]
    return results, model


def test_training_is_deterministic(utts):
    (ra, ma), (rb, mb) = run_steps(utts), run_steps(utts)
    assert [r.mel_loss for r in ra] == [r.mel_loss for r in rb]
    for (_, a), (_, b) in zip(ma.params.items(), mb.params.items()):
        assert a.data.tobytes() == b.data.tobytes()


def test_training_reduces_loss(utts):
    results, model = run_steps(utts, 40)
    assert results[-1].mel_loss < results[0].mel_loss
    assert all(r.grad_norm > 0 for r in results)
    assert evaluate_mel_mse(model, utts) < results[0].mel_loss


def test_checkpoint_round_trip(tmp_path, utts):
    ckpt = train(utts, TrainConfig(steps=2, batch_size=2), ModelConfig(**SMALL), out_dir=tmp_path, extra={"hop": 256})
    loaded = Checkpoint.load(tmp_path / "final.sspc")
    assert loaded.step == 2 and loaded.mode == "joint"
    assert loaded.extra == {"hop": 256, "style": "normal"}
    assert loaded.model_config == ckpt.model_config
    assert all(np.array_equal(loaded.params[n], ckpt.params[n]) for n in ckpt.params)
    assert loaded.to_bytes() == ckpt.to_bytes()
    model = loaded.build_model()
    assert all(np.array_equal(t.data, ckpt.params[n]) for n, t in model.params.items())


def test_checkpoint_corruption(tmp_path, utts):
    raw = train(utts, TrainConfig(steps=1, batch_size=2), ModelConfig(**SMALL)).to_bytes()
    for bad in (b"XXXX" + raw[4:], raw[:-8], raw + b"\0\0\0\0", raw[:6], raw[:4] + b"\x09" + raw[5:]):
        with pytest.raises(CorruptCheckpoint):
            Checkpoint.from_bytes(bad)
    with pytest.raises(CorruptCheckpoint):
        Checkpoint.load(tmp_path / "missing.sspc")


def test_periodic_checkpoints(tmp_path, utts):
    train(utts, TrainConfig(steps=4, batch_size=1, checkpoint_every=2), ModelConfig(**SMALL), out_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["final.sspc", "step0000002.sspc", "step0000004.sspc"]


def test_lora_keeps_frozen_groups(utts):
    base = train(utts, TrainConfig(mode="lora", steps=3, batch_size=2), ModelConfig(**SMALL))
    assert base.freeze["style_encoder"] is False and base.extra["style"] == "none"
    adapted = lora_adapt(base, utts, TrainConfig(mode="lora", steps=100, batch_size=2))
    for group in LORA_FROZEN:
        assert adapted.blob_hash(group) == base.blob_hash(group)
        assert adapted.freeze[group] is False
    assert adapted.blob_hash("style_encoder") != base.blob_hash("style_encoder")
    assert adapted.extra["style"] == "normal" and adapted.mode == "lora"
