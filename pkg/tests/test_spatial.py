import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stcorr import tensor as T
from stcorr.data import AugmentationPolicy, rgb_to_lab
from stcorr.encoder import Encoder, EncoderConfig
from stcorr.optim import Adam
from stcorr.spatial import (NegativeQueue, SpatialError, SpatialModel, info_nce_loss, spatial_train_step,
                            sprite_corpus)
from stcorr.tensor import Tensor


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_empty_queue_positive_only_is_zero():
    q = unit([0.3, 0.4, 0.5])
    assert info_nce_loss(q, q, np.zeros((0, 3)), 0.07).item() == 0.0


def test_two_orthogonal_negatives():
    q = np.array([1.0, 0.0, 0.0])
    val = info_nce_loss(q, q, np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]), 1.0).item()
    assert abs(val - (-math.log(math.e / (math.e + 2)))) < 1e-15
    assert abs(val - 0.5514) < 1e-4


def test_single_negative_closed_form():
    val = info_nce_loss([1.0, 0.0], [1.0, 0.0], [[0.0, 1.0]], 1.0).item()
    assert abs(val - math.log(1 + math.exp(-1))) < 1e-15
    assert abs(val - 0.3133) < 1e-4


def test_errors():
    with pytest.raises(SpatialError):
        info_nce_loss([0.0, 0.0], [1.0, 0.0], [[0.0, 1.0]])
    with pytest.raises(SpatialError):
        info_nce_loss([1.0, 0.0], [1.0, 0.0], [[0.0, 1.0]], tau_c=0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 6))
def test_nonnegative_and_permutation_invariant(seed, K):
    rng = np.random.default_rng(seed)
    q, k = unit(rng.normal(size=4)), unit(rng.normal(size=4))
    neg = unit(rng.normal(size=(K, 4))) if K else np.zeros((0, 4))
    a = info_nce_loss(q, k, neg, 0.2).item()
    b = info_nce_loss(q, k, neg[rng.permutation(K)], 0.2).item()
    assert a >= 0 and abs(a - b) < 1e-12


def test_monotone_in_positive_similarity():
    q = np.array([1.0, 0.0])
    neg = np.array([[0.0, 1.0], [-1.0, 0.0]])
    vals = [info_nce_loss(q, unit([math.cos(t), math.sin(t)]), neg, 0.5).item() for t in (1.2, 0.8, 0.4, 0.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_gradient():
    rng = np.random.default_rng(0)
    neg = unit(rng.normal(size=(5, 4)))
    k = Tensor(unit(rng.normal(size=(3, 4))))
    q0 = Tensor(unit(rng.normal(size=(3, 4))))
    assert T.finite_difference_check(lambda x: info_nce_loss(x, k, neg, 0.3), q0) <= 1e-4
    assert T.finite_difference_check(lambda x: info_nce_loss(q0, x, neg, 0.3), k) <= 1e-4


# -------------------------------------------------------------------- queue
def test_queue_fifo_and_norms():
    qu = NegativeQueue(3, 2)
    keys = unit(np.random.default_rng(1).normal(size=(5, 2)))
    qu.enqueue(keys[:2])
    np.testing.assert_array_equal(qu.entries(), keys[:2])
    qu.enqueue(keys[2:])
    np.testing.assert_array_equal(qu.entries(), keys[2:])
    assert len(qu) == 3
    with pytest.raises(SpatialError):
        qu.enqueue(np.array([[2.0, 0.0]]))
    with pytest.raises(SpatialError):
        qu.enqueue(np.array([[1.0, 0.0, 0.0]]))


# --------------------------------------------------------------- train step
def _models(seed=0):
    enc = Encoder(EncoderConfig(seed=seed))
    student = SpatialModel(enc)
    return student, student.momentum_copy()


def test_first_step_with_equal_views_is_zero_and_queue_grows():
    student, key = _models()
    img = sprite_corpus(1, 32, seed=0)
    v = rgb_to_lab(np.concatenate([img, img]), normalize=True)
    qu = NegativeQueue(16, student.head.out_dim)
    opt = Adam(student.params, lr=1e-3)
    loss = spatial_train_step([0, 0], student, key, qu, AugmentationPolicy.identity(32), opt,
                              np.random.default_rng(0), views=(v, v))
    assert loss == 0.0
    assert len(qu) == 2
    np.testing.assert_allclose(np.linalg.norm(qu.entries(), axis=1), 1.0, atol=1e-5)
    loss2 = spatial_train_step([0, 0], student, key, qu, AugmentationPolicy.identity(32), opt,
                               np.random.default_rng(0), views=(v, v))
    assert loss2 > 0 and len(qu) == 4


def test_keys_receive_no_gradient_and_momentum_moves_key_model():
    student, key = _models(1)
    imgs = sprite_corpus(2, 48, seed=1)
    qu = NegativeQueue(8, student.head.out_dim)
    opt = Adam(student.params, lr=1e-2)
    before = {k: v.data.copy() for k, v in key.params.items()}
    spatial_train_step(imgs, student, key, qu, AugmentationPolicy(out_size=32), opt, np.random.default_rng(1))
    assert all(p.grad is None for p in key.params.values())
    moved = [not np.array_equal(before[k], key.params[k].data) for k in before]
    assert any(moved)


def test_empty_batch_rejected():
    student, key = _models()
    with pytest.raises(SpatialError):
        spatial_train_step([], student, key, NegativeQueue(4, 32), AugmentationPolicy(),
                           Adam(student.params), np.random.default_rng(0))


def test_default_run_ends_below_its_start():
    from stcorr.config import RunConfig
    from stcorr.pipeline import train_spatial

    _, rows = train_spatial(RunConfig())
    loss = np.array([v for _, v in rows])
    assert len(loss) == 500 and np.all(np.isfinite(loss))
    assert loss[-50:].mean() < loss[:10].mean()
