import numpy as np
import pytest

from stcorr import tensor as T
from stcorr.data import rgb_to_lab, texture
from stcorr.encoder import (Encoder, EncoderConfig, EncoderConfigError, FrozenEncoderError, freeze,
                            momentum_update)
from stcorr.optim import Adam
from stcorr.tensor import Tensor


@pytest.mark.parametrize("size,shapes", [(64, [(16, 16), (8, 8), (2, 2)]), (128, [(32, 32), (16, 16), (4, 4)])])
def test_level_shapes(size, shapes):
    enc = Encoder(EncoderConfig())
    pyr = enc.forward(np.zeros((size, size, 3)))
    assert [pyr[l].shape[:2] for l in (1, 2, 3)] == shapes
    assert [pyr[l].shape[2] for l in (1, 2, 3)] == [16, 32, 64]


def test_batched_forward_matches_single():
    enc = Encoder(EncoderConfig(seed=1))
    x = np.random.default_rng(0).uniform(-0.5, 0.5, (2, 32, 32, 3))
    pb = enc.forward(x)
    for i in range(2):
        np.testing.assert_allclose(pb[1].data[i], enc.forward(x[i])[1].data, atol=1e-14)


def test_zero_weights_give_zero_features():
    enc = Encoder(EncoderConfig())
    enc.load_state_dict({k: np.zeros_like(v) for k, v in enc.state_dict().items()})
    pyr = enc.forward(np.random.default_rng(1).uniform(-0.5, 0.5, (64, 64, 3)), normalize=False)
    for l in (1, 2, 3):
        assert np.all(pyr[l].data == 0)


def test_indivisible_input_names_multiple():
    with pytest.raises(EncoderConfigError, match="multiple of 32"):
        Encoder(EncoderConfig()).forward(np.zeros((48, 64, 3)))


def test_config_validation():
    with pytest.raises(EncoderConfigError):
        EncoderConfig(stage_total_strides=(4, 4, 32))
    with pytest.raises(EncoderConfigError):
        EncoderConfig(stage_total_strides=(4, 12, 24))
    with pytest.raises(EncoderConfigError):
        EncoderConfig(stage_channels=(8, 8))
    assert EncoderConfig.stride4().stage_total_strides == (2, 4, 16)
    cfg = EncoderConfig(seed=4)
    assert EncoderConfig.from_dict(cfg.to_dict()) == cfg


def test_levels_unit_norm():
    enc = Encoder(EncoderConfig(seed=2))
    pyr = enc.forward(np.random.default_rng(2).uniform(-0.5, 0.5, (64, 64, 3)))
    for l in (1, 2, 3):
        np.testing.assert_allclose(np.linalg.norm(pyr[l].data, axis=-1), 1.0, atol=1e-5)


def test_deterministic_given_seed():
    a, b = Encoder(EncoderConfig(seed=3)), Encoder(EncoderConfig(seed=3))
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_translation_covariance_on_periodic_texture():
    tile = rgb_to_lab(0.8 * texture(3, 32, 32, np.random.default_rng(0)) + 0.1, normalize=True)
    img = np.tile(tile, (10, 10, 1))
    enc = Encoder(EncoderConfig(seed=5))
    a, b = enc.forward(img), enc.forward(np.roll(img, 32, axis=1))
    m = 3
    for l, s in zip((1, 2, 3), (4, 8, 32)):
        k = 32 // s
        d = np.abs(np.roll(a[l].data, k, axis=1) - b[l].data)
        assert d[m:-m, m + k:-m].max() <= 1e-5


# ------------------------------------------------------------------ momentum
def _pair():
    t, s = Encoder(EncoderConfig(seed=6)), Encoder(EncoderConfig(seed=7))
    return t.params, s.params


def test_momentum_extremes():
    t, s = _pair()
    before = {k: v.data.copy() for k, v in t.items()}
    momentum_update(t, s, 1.0)
    for k in t:
        np.testing.assert_array_equal(t[k].data, before[k])
    momentum_update(t, s, 0.0)
    for k in t:
        np.testing.assert_array_equal(t[k].data, s[k].data)


def test_momentum_arithmetic():
    t = {"w": Tensor(np.zeros(3))}
    momentum_update(t, {"w": Tensor(np.ones(3))}, 0.999)
    np.testing.assert_allclose(t["w"].data, 0.001, rtol=1e-12)


def test_momentum_structure_mismatch():
    t, s = _pair()
    with pytest.raises(EncoderConfigError):
        momentum_update(t, {k: v for k, v in list(s.items())[:-1]}, 0.5)
    with pytest.raises(ValueError):
        momentum_update(t, s, 1.5)


# -------------------------------------------------------------------- freeze
def test_freeze_equal_at_freeze_time_and_immutable():
    enc = Encoder(EncoderConfig(seed=8))
    teacher = freeze(enc)
    x = np.random.default_rng(3).uniform(-0.5, 0.5, (1, 32, 32, 3))
    before = teacher.forward(x)[3].data.copy()
    np.testing.assert_array_equal(before, enc.forward(x)[3].data)
    opt = Adam(enc.params, lr=1e-2)
    for _ in range(5):
        opt.zero_grad()
        T.backpropagate(T.sum_(enc.forward(x)[2]))
        opt.step()
    np.testing.assert_array_equal(teacher.forward(x)[3].data, before)
    assert not np.array_equal(enc.forward(x)[3].data, before)


def test_frozen_forward_records_nothing():
    teacher = freeze(Encoder(EncoderConfig(seed=9)))
    out = teacher.forward(np.zeros((32, 32, 3)))[1]
    assert not out.requires_grad
    assert all(not p.requires_grad and not p.data.flags.writeable for p in teacher.params.values())
    with pytest.raises(ValueError):
        teacher.params["s0.tap.w"].data[0, 0, 0, 0] = 1.0


def test_momentum_into_frozen_teacher_refused():
    enc = Encoder(EncoderConfig(seed=10))
    with pytest.raises(FrozenEncoderError):
        momentum_update(freeze(enc).params, enc.params, 0.5)


def test_state_dict_round_trip():
    a, b = Encoder(EncoderConfig(seed=11)), Encoder(EncoderConfig(seed=12))
    b.load_state_dict(a.state_dict())
    x = np.random.default_rng(4).uniform(-0.5, 0.5, (32, 32, 3))
    np.testing.assert_array_equal(a.forward(x)[2].data, b.forward(x)[2].data)
    with pytest.raises(EncoderConfigError):
        b.load_state_dict({"nope": np.zeros(1)})
