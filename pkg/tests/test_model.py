import warnings

import numpy as np
import pytest

from tonetts import autodiff as ad
from tonetts.autodiff import Tensor
from tonetts.errors import ShapeMismatch
from tonetts.model import (
    GROUPS, AcousticModel, DegenerateExpansion, IdOutOfRange, LengthMismatch, MissingDurations,
    ModelConfig, NegativeDuration, collate, durations_from_log, fuse, length_regulate, losses,
)

SMALL = dict(d_model=16, n_heads=2, n_blocks=2, conv_filter=24, duration_filter=16)


def small_model(stage=0, seed=0):
    return AcousticModel(ModelConfig(fusion_stage=stage, **SMALL), seed=seed)


def toy_batch(with_targets=True):
    phonemes = [[5, 30, 8, 22], [16, 35]]
    tones = [[1, 4, 1, 4], [1, 3]]
    if not with_targets:
        return collate(phonemes, tones)
    durations = [[2, 3, 1, 4], [3, 2]]
    rng = np.random.default_rng(0)
    mels = [rng.standard_normal((10, 80)).astype(np.float32), rng.standard_normal((5, 80)).astype(np.float32)]
    return collate(phonemes, tones, durations, mels)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(fusion_stage=3)
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"d_model": 8, "bogus": 1})
    cfg = ModelConfig(**SMALL)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert ModelConfig().n_blocks == 4 and ModelConfig().n_mels == 80
    assert (ModelConfig().dropout_fft, ModelConfig().dropout_duration) == (0.5, 0.1)


def test_parameter_groups_disjoint_and_ordered():
    model = small_model()
    assert model.params.groups() == list(GROUPS)
    names = model.params.names()
    assert len(names) == len(set(names))
    assert np.all(model.params["phoneme_encoder.embedding"].data[0] == 0)
    assert np.all(model.params["style_encoder.embedding"].data[0] == 0)


def test_fft_block_shapes_and_masks():
    model = small_model()
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((2, 6, 16)).astype(np.float32))
    mask = np.ones((2, 6), dtype=bool)
    mask[1, 4:] = False
    y, w = model.fft_block(x, mask, "phoneme_encoder.block0", return_attention=True)
    assert y.shape == x.shape
    assert np.all(y.data[1, 4:] == 0)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-6)
    assert np.all(w.data[1, :, :, 4:] == 0)
    empty = model.fft_block(x, np.zeros((2, 6), dtype=bool), "phoneme_encoder.block0")
    assert np.all(empty.data == 0)
    with pytest.raises(ShapeMismatch):
        model.fft_block(Tensor(np.zeros((2, 6, 8))), mask, "phoneme_encoder.block0")


def test_encoders_are_disjoint():
    model = small_model()
    b = toy_batch(False)
    hp = model.encode_phonemes(b.phonemes, b.token_mask).data
    hs = model.encode_styles(b.tones, b.token_mask).data
    assert hp.shape == hs.shape == (2, 4, 16)
    other = b.tones.copy()
    other[0, 1] = 2
    assert np.array_equal(model.encode_phonemes(b.phonemes, b.token_mask).data, hp)
    assert not np.array_equal(model.encode_styles(other, b.token_mask).data, hs)
    with pytest.raises(IdOutOfRange):
        model.encode_phonemes(np.full((1, 2), 99), np.ones((1, 2), dtype=bool))


def test_batch_permutation_equivariance():
    model = small_model()
    b = toy_batch(False)
    flipped = collate([b.phonemes[1, :2], b.phonemes[0]], [b.tones[1, :2], b.tones[0]])
    out = model.encode_phonemes(b.phonemes, b.token_mask).data
    out_f = model.encode_phonemes(flipped.phonemes, flipped.token_mask).data
    np.testing.assert_allclose(out_f[1], out[0], atol=1e-5)
    np.testing.assert_allclose(out_f[0, :2], out[1, :2], atol=1e-5)


def test_length_regulator_examples():
    h = Tensor(np.array([[1.0, 1], [2, 2], [3, 3]]))
    out, mask = length_regulate(h, [2, 0, 3])
    np.testing.assert_array_equal(out.data[:, 0], [1, 1, 3, 3, 3])
    assert mask.all()
    ident, _ = length_regulate(h, [1, 1, 1])
    np.testing.assert_array_equal(ident.data, h.data)
    with pytest.warns(DegenerateExpansion):
        empty, _ = length_regulate(h, [0, 0, 0])
    assert empty.shape == (0, 2)
    with pytest.raises(LengthMismatch):
        length_regulate(h, [1, 2])
    with pytest.raises(NegativeDuration):
        length_regulate(h, [1, -1, 2])


def test_length_regulator_gradient_sums_repeats():
    h = Tensor(np.ones((1, 2, 3)), trainable=True)
    out, _ = length_regulate(h, np.array([[3, 1]]))
    ad.backward(ad.sum_(out))
    np.testing.assert_array_equal(h.grad[0, :, 0], [3, 1])


def test_fuse():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 4))
    np.testing.assert_array_equal(fuse(a, np.zeros_like(a)).data, a)
    np.testing.assert_array_equal(fuse(a, b).data, fuse(b, a).data)
    np.testing.assert_allclose(fuse(a, b).data - a, b, atol=1e-15)
    with pytest.raises(ShapeMismatch):
        fuse(a, b[:, :2])


def test_duration_round_trip():
    d = np.array([0, 1, 2, 7, 30])
    np.testing.assert_array_equal(durations_from_log(np.log(d + 1.0)), d)
    np.testing.assert_array_equal(durations_from_log(np.array([-3.0])), [0])


@pytest.mark.parametrize("stage", [0, 1, 2])
def test_forward_length_law(stage):
    model = small_model(stage)
    b = toy_batch()
    out = model.forward(b, training=True, rng=np.random.default_rng(0))
    assert out.mel.shape == (2, 10, 80)
    assert out.frame_mask.sum(1).tolist() == [10, 5]
    assert np.all(out.mel.data[1, 5:] == 0)
    assert out.log_durations.shape == (2, 4)
    mel_loss, dur_loss = losses(model, b, out)
    assert mel_loss.data.shape == () and float(dur_loss.data) >= 0
    pred = model.forward(b, training=False, use_gt_durations=False)
    assert pred.mel.shape[1] == int(pred.durations.sum(1).max())


def test_training_requires_durations():
    with pytest.raises(MissingDurations):
        small_model().forward(toy_batch(False), training=True, rng=np.random.default_rng(0))


def test_stage1_durations_ignore_tones():
    model = small_model(1)
    b = toy_batch(False)
    base = model.forward(b).log_durations.data
    b.tones[0, 1] = 2
    assert np.array_equal(model.forward(b).log_durations.data, base)
    model0 = small_model(0)
    base0 = model0.forward(toy_batch(False)).log_durations.data
    assert not np.array_equal(model0.forward(b).log_durations.data, base0)


def test_pad_excluded_from_duration_loss():
    model = small_model()
    b = toy_batch()
    out = model.forward(b, use_gt_durations=True)
    _, loss = losses(model, b, out)
    b.durations[1, 2:] = 50  # PAD positions
    _, loss2 = losses(model, b, out)
    assert float(loss.data) == float(loss2.data)


def test_decode_mel_boundaries():
    model = small_model()
    out = model.decode_mel(np.zeros((1, 0, 16), dtype=np.float32), np.zeros((1, 0), dtype=bool))
    assert out.shape == (1, 0, 80)
    for seed in range(100):
        h = np.random.default_rng(seed).standard_normal((1, 7, 16)).astype(np.float32)
        y = model.decode_mel(h, np.ones((1, 7), dtype=bool)).data
        assert y.shape == (1, 7, 80) and np.all(np.isfinite(y))


def test_eval_is_deterministic():
    model = small_model(2)
    b = toy_batch()
    with ad.no_grad():
        a = model.forward(b, use_gt_durations=True).mel.data
        c = model.forward(b, use_gt_durations=True).mel.data
    assert a.tobytes() == c.tobytes()


def test_infer():
    model = small_model()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateExpansion)
        mel, durations = model.infer([16, 35], [1, 2])
    assert mel.shape == (int(durations.sum()), 80)
