"""Finite-difference suites for every loss term and the composite objective.

Each check returns a :class:`GradCheck` row. Loss terms are checked with
respect to their feature inputs at tolerance 1e-4; the composite loss is
checked through a tiny encoder at 1e-3 with the detached targets (pseudo
labels, entropy mask, teacher map) held fixed, since those carry no gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .correlation import (correlation_downsample, entropy_map, entropy_mask, global_correlation,
                          local_correlation)
from .data import frame_pyramid
from .encoder import Encoder, EncoderConfig, freeze
from .spatial import info_nce_loss
from .temporal import (TemporalConfig, global_correlation_distillation, local_correlation_distillation,
                       pyramid_reconstruction_loss, reconstruct_frame, reconstruction_loss,
                       temporal_losses, temporal_total_loss)
from .tensor import Tensor

LOSS_TOL = 1e-4
COMPOSITE_TOL = 1e-3


@dataclass
class GradCheck:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error <= self.tol

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name:<34} max rel err {self.error:.2e} (tol {self.tol:.0e})"


def _unit(rng, *shape):
    f = rng.normal(size=shape)
    return f / np.linalg.norm(f, axis=-1, keepdims=True)


def check_info_nce(rng) -> GradCheck:
    neg = _unit(rng, 6, 8)
    k = Tensor(_unit(rng, 3, 8))
    q = Tensor(_unit(rng, 3, 8))
    err = max(T.finite_difference_check(lambda x: info_nce_loss(x, k, neg, 0.2), q),
              T.finite_difference_check(lambda x: info_nce_loss(q, x, neg, 0.2), k))
    return GradCheck("contrastive (InfoNCE)", err, LOSS_TOL)


def check_global_distillation(rng) -> GradCheck:
    Fr = _unit(rng, 1, 3, 4, 6)
    teacher = global_correlation(_unit(rng, 1, 3, 4, 6), _unit(rng, 1, 3, 4, 6), 0.2)
    x0 = Tensor(_unit(rng, 1, 3, 4, 6))
    f = lambda x: global_correlation_distillation(global_correlation(x, Fr, 0.2), teacher)
    return GradCheck("global correlation distillation", T.finite_difference_check(f, x0), LOSS_TOL)


def check_reconstruction(rng) -> GradCheck:
    Fr = _unit(rng, 1, 6, 6, 4)
    I_r, I_t = rng.random((6, 6, 3)), rng.random((6, 6, 3))
    x0 = Tensor(_unit(rng, 1, 6, 6, 4))
    f = lambda x: reconstruction_loss(reconstruct_frame(local_correlation(x, Fr, 3, 0.3), I_r), I_t)
    g = lambda x: reconstruction_loss(reconstruct_frame(local_correlation(x0, Fr, 3, 0.3), x), I_t)
    err = max(T.finite_difference_check(f, x0), T.finite_difference_check(g, Tensor(I_r[None])))
    return GradCheck("local correlation + reconstruction", err, LOSS_TOL)


def check_pyramid_reconstruction(rng) -> GradCheck:
    F2r = _unit(rng, 1, 4, 4, 4)
    F1t, F1r = Tensor(_unit(rng, 1, 8, 8, 4)), _unit(rng, 1, 8, 8, 4)
    ft = {1: rng.random((8, 8, 3)), 2: rng.random((4, 4, 3))}
    fr = {1: rng.random((8, 8, 3)), 2: rng.random((4, 4, 3))}

    def f(x):
        c = {1: local_correlation(F1t, F1r, 5, 0.3), 2: local_correlation(x, F2r, 3, 0.3)}
        return pyramid_reconstruction_loss(c, ft, fr)

    return GradCheck("pyramid reconstruction", T.finite_difference_check(f, Tensor(_unit(rng, 1, 4, 4, 4))),
                     LOSS_TOL)


def check_local_distillation(rng) -> GradCheck:
    Fr = _unit(rng, 1, 5, 5, 4)
    fine = local_correlation(_unit(rng, 1, 10, 10, 4), _unit(rng, 1, 10, 10, 4), 5, 0.3)
    pseudo = correlation_downsample(fine, s=2, r_out=3)
    x0 = Tensor(_unit(rng, 1, 5, 5, 4))
    mask = entropy_mask(entropy_map(local_correlation(x0, Fr, 3, 0.3)), "q0.5")
    f = lambda x: local_correlation_distillation(local_correlation(x, Fr, 3, 0.3), pseudo, mask)
    return GradCheck("local correlation distillation", T.finite_difference_check(f, x0), LOSS_TOL)


TINY_ENCODER = dict(stage_channels=(2, 2, 2), stage_total_strides=(2, 4, 8))


def check_composite(rng, keys=("s0.down0.w", "s1.tap.w", "s2.down0.b", "s2.tap.w"),
                    coords_per_key: int = 12) -> GradCheck:
    cfg = TemporalConfig(windows=(5, 3), tau=0.2, dropout_prob=0.0)
    base = Encoder(EncoderConfig(seed=int(rng.integers(1 << 16)), **TINY_ENCODER))
    teacher = freeze(Encoder(EncoderConfig(seed=int(rng.integers(1 << 16)), **TINY_ENCODER)))
    I_t, I_r = rng.uniform(-0.5, 0.5, (1, 16, 16, 3)), rng.uniform(-0.5, 0.5, (1, 16, 16, 3))
    ref = temporal_losses(base, teacher, I_t, I_r, cfg)
    pseudo = correlation_downsample(ref.corr[1], s=2, r_out=cfg.windows[1])
    mask = entropy_mask(entropy_map(ref.corr[2], cfg.entropy_convention), cfg.threshold)
    tp = teacher.forward(np.concatenate([I_t, I_r]))
    a_t = global_correlation(tp[3][:1], tp[3][1:], cfg.tau)
    strides = base.config.stage_total_strides
    ft, fr = frame_pyramid(I_t, strides), frame_pyramid(I_r, strides)

    def composite(enc):
        p = enc.forward(np.concatenate([I_t, I_r]))
        c = {l: local_correlation(p[l][:1], p[l][1:], cfg.windows[l - 1], cfg.tau, level=l) for l in (1, 2)}
        rec = pyramid_reconstruction_loss(c, {l: ft[l - 1] for l in c}, {l: fr[l - 1] for l in c})
        lc = local_correlation_distillation(c[2], pseudo, mask)
        gc = global_correlation_distillation(global_correlation(p[3][:1], p[3][1:], cfg.tau), a_t)
        return temporal_total_loss(rec, lc, gc, cfg.weights)

    if abs(composite(base).item() - ref.total.item()) > 1e-12:
        return GradCheck("composite total through encoder", float("inf"), COMPOSITE_TOL)
    worst = 0.0
    for key in keys:
        def f(x, key=key):
            params = dict(base.params)
            params[key] = x
            return composite(Encoder(base.config, params))

        x = base.params[key]
        coords = rng.choice(x.size, size=min(coords_per_key, x.size), replace=False)
        worst = max(worst, T.finite_difference_check(f, Tensor(x.data), coords=coords))
    return GradCheck("composite total through encoder", worst, COMPOSITE_TOL)


SUITES = (check_info_nce, check_global_distillation, check_reconstruction, check_pyramid_reconstruction,
          check_local_distillation, check_composite)


def run_gradcheck(seed: int = 0) -> list[GradCheck]:
    rng = np.random.default_rng(seed)
    return [suite(rng) for suite in SUITES]
