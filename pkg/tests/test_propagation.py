import numpy as np
import pytest

from stcorr.correlation import local_correlation
from stcorr.encoder import Encoder, EncoderConfig
from stcorr.propagation import (PropagationError, PropagationMemory, PropagationParams, propagate_step,
                                run_sequence)
from stcorr.temporal import reconstruct_frame


def unit(rng, *shape):
    f = rng.normal(size=shape)
    return f / np.linalg.norm(f, axis=-1, keepdims=True)


def soft(rng, h, w, C):
    p = rng.random((h, w, C))
    return p / p.sum(-1, keepdims=True)


def test_single_entry_top1_returns_labels():
    rng = np.random.default_rng(0)
    F = unit(rng, 6, 6, 16)
    lab = soft(rng, 6, 6, 3)
    out = propagate_step(PropagationMemory(4, [(F, lab)]), F, r_eval=5, tau=0.07, top_k=1)
    np.testing.assert_array_equal(out, lab)


@pytest.mark.parametrize("r", [1, 3, 5])
def test_untruncated_single_entry_equals_reconstruction(r):
    rng = np.random.default_rng(r)
    for _ in range(5):
        Fm, Fc = unit(rng, 6, 7, 4), unit(rng, 6, 7, 4)
        lab = soft(rng, 6, 7, 3)
        out = propagate_step(PropagationMemory(4, [(Fm, lab)]), Fc, r_eval=r, tau=0.1, top_k=r * r)
        c = local_correlation(Fc, Fm, r, 0.1)
        np.testing.assert_allclose(out, reconstruct_frame(c, lab).data[0], atol=1e-6)


def test_matching_entry_dominates():
    rng = np.random.default_rng(1)
    F = unit(rng, 4, 4, 8)
    ortho = np.zeros((4, 4, 8))
    ortho[...] = 0.0
    # orthogonal features: project out F
    g = unit(rng, 4, 4, 8)
    g = g - (g * F).sum(-1, keepdims=True) * F
    g /= np.linalg.norm(g, axis=-1, keepdims=True)
    lab_a, lab_b = np.eye(2)[np.zeros((4, 4), int)], np.eye(2)[np.ones((4, 4), int)]
    mem = PropagationMemory(4, [(F, lab_a), (g, lab_b)])
    out = propagate_step(mem, F, r_eval=1, tau=0.01, top_k=2)
    w = 1.0 / (1.0 + np.exp(-1.0 / 0.01))
    np.testing.assert_allclose(out[..., 0], w, rtol=1e-12)


def test_uniform_features_average_window_labels():
    F = np.ones((5, 5, 2)) / np.sqrt(2)
    lab = soft(np.random.default_rng(2), 5, 5, 3)
    out = propagate_step(PropagationMemory(4, [(F, lab)]), F, r_eval=3, tau=0.07, top_k=9)
    np.testing.assert_allclose(out[2, 2], lab[1:4, 1:4].reshape(-1, 3).mean(0), atol=1e-12)
    np.testing.assert_allclose(out[0, 0], lab[0:2, 0:2].reshape(-1, 3).mean(0), atol=1e-12)


def test_simplex_and_permutation_equivariance():
    rng = np.random.default_rng(3)
    mem_entries = [(unit(rng, 6, 6, 8), soft(rng, 6, 6, 4)) for _ in range(3)]
    Fc = unit(rng, 6, 6, 8)
    out = propagate_step(PropagationMemory(4, mem_entries), Fc, 5, 0.07, 10)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-5)
    perm = np.array([2, 0, 3, 1])
    permuted = PropagationMemory(4, [(f, l[..., perm]) for f, l in mem_entries])
    np.testing.assert_allclose(propagate_step(permuted, Fc, 5, 0.07, 10), out[..., perm], atol=1e-15)


def test_errors():
    with pytest.raises(PropagationError):
        propagate_step(PropagationMemory(4), np.ones((2, 2, 1)))
    m = PropagationMemory(4, [(np.ones((2, 2, 1)), np.ones((2, 2, 1)))])
    with pytest.raises(PropagationError):
        propagate_step(m, np.ones((3, 3, 1)))


def test_memory_keeps_first_and_last_m():
    mem = PropagationMemory(4)
    for t in range(10):
        mem.add(np.full((1, 1, 1), t), np.zeros((1, 1, 1)))
    assert len(mem) == 5
    assert [int(f[0, 0, 0]) for f, _ in mem.entries] == [0, 6, 7, 8, 9]


def test_identical_frames_keep_labels():
    rng = np.random.default_rng(4)
    enc = Encoder(EncoderConfig(seed=0))
    H = 64
    feats = np.repeat(unit(rng, 1, 8, 8, 32), 6, axis=0)
    init = np.zeros((H, H), dtype=int)
    init[8:40, 16:48] = 1
    init[40:56, 8:24] = 2
    res = run_sequence(np.zeros((6, H, H, 3)), enc, init, PropagationParams(), n_classes=3, features=feats)
    for t in range(6):
        np.testing.assert_array_equal(res.labels[t], init)
    assert res.memory_length == 5


def test_label_channel_mismatch():
    enc = Encoder(EncoderConfig(seed=0))
    with pytest.raises(PropagationError):
        run_sequence(np.zeros((2, 64, 64, 3)), enc, np.zeros((64, 64, 2)), n_classes=3)
