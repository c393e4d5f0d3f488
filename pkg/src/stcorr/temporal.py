"""Temporal feature learning: pyramid reconstruction plus local/global distillation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .correlation import (DEFAULT_TAU, GlobalCorrelationMap, LocalCorrelationMap,
                          correlation_downsample, entropy_map, entropy_mask, global_correlation,
                          local_correlation, window_weighted_sum)
from .data import frame_pyramid
from .encoder import Encoder, FrozenEncoder
from .optim import Adam
from .tensor import Tensor

log = logging.getLogger(__name__)


class TemporalError(ValueError):
    pass


@dataclass
class TemporalLossWeights:
    alpha: float = 1.0
    beta: float = 10.0

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise TemporalError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class TemporalConfig:
    windows: tuple[int, ...] = (17, 9)      # r^l for levels 1 .. N-1
    tau: float = DEFAULT_TAU
    weights: TemporalLossWeights = field(default_factory=TemporalLossWeights)
    pyramid: bool = True                    # reconstruct at every level 1 .. N-1, else only N-1
    entropy_select: bool = True
    entropy_convention: str = "as-written"
    threshold: str = "q0.5"
    dropout_prob: float = 0.8


@dataclass
class LossBreakdown:
    rec: float
    lc: float
    gc: float
    total: float
    masked_fraction: float

    def as_row(self) -> list[float]:
        return [self.rec, self.lc, self.gc, self.total, self.masked_fraction]


# ---------------------------------------------------------------- loss terms
def reconstruct_frame(c: LocalCorrelationMap, I_r) -> Tensor:
    """I_hat(i) = sum over i's window of c_ij * I_r(j)."""
    I_r = T.as_tensor(I_r)
    if I_r.ndim == 3:
        I_r = T.reshape(I_r, (1,) + I_r.shape)
    if I_r.shape[1:3] != c.values.shape[1:3]:
        raise TemporalError(f"correlation is {c.values.shape[1:3]} but frame is {I_r.shape[1:3]}: "
                            "level mismatch")
    return window_weighted_sum(c.values, I_r, c.r)


def reconstruction_loss(I_hat, I_t) -> Tensor:
    """Mean absolute difference over pixels and channels."""
    I_hat, I_t = T.as_tensor(I_hat), T.as_tensor(I_t)
    if I_hat.size != I_t.size:
        raise T.ShapeError(f"reconstruction_loss: shapes differ {I_hat.shape} vs {I_t.shape}")
    if I_hat.shape != I_t.shape:
        I_t = T.reshape(I_t, I_hat.shape)
    return T.mean(T.l1_diff(I_hat, I_t))


def pyramid_reconstruction_loss(corr: dict[int, LocalCorrelationMap], frames_t: dict[int, object],
                                frames_r: dict[int, object]) -> Tensor:
    """Sum over levels of reconstruction_loss(T(c^l, I_r^l), I_t^l)."""
    if not corr:
        raise TemporalError("pyramid reconstruction needs at least one level")
    total = None
    for l, c in sorted(corr.items()):
        if l not in frames_t or l not in frames_r:
            raise TemporalError(f"frame pyramid is missing level {l}")
        term = reconstruction_loss(reconstruct_frame(c, frames_r[l]), frames_t[l])
        total = term if total is None else T.add(total, term)
    return total


def local_correlation_distillation(c_student: LocalCorrelationMap, c_pseudo, mask) -> Tensor:
    """Masked MSE between student rows and detached pseudo-label rows.

    Normalized by (selected queries x window cells). An empty mask gives 0.
    """
    target = c_pseudo.values.data if isinstance(c_pseudo, LocalCorrelationMap) else np.asarray(
        T.as_tensor(c_pseudo).data)
    vals = c_student.values
    if target.shape != vals.shape:
        raise T.ShapeError(f"local distillation: student {vals.shape} vs pseudo label {target.shape}")
    m = np.asarray(mask, dtype=np.float64).reshape(vals.shape[:-1])
    selected = m.sum()
    if selected == 0:
        log.debug("local distillation: empty entropy mask, loss is 0")
        return Tensor(np.array(0.0))
    sq = T.sq_diff(vals, Tensor(target))
    weighted = T.mul(sq, m[..., None])
    return T.mul(T.sum_(weighted), 1.0 / (selected * vals.shape[-1]))


def global_correlation_distillation(a_student: GlobalCorrelationMap | Tensor,
                                    a_teacher: GlobalCorrelationMap | Tensor | np.ndarray) -> Tensor:
    """Mean squared difference over all entries; the teacher map is detached."""
    a = a_student.values if isinstance(a_student, GlobalCorrelationMap) else T.as_tensor(a_student)
    t = a_teacher.values if isinstance(a_teacher, GlobalCorrelationMap) else T.as_tensor(a_teacher)
    if a.shape != t.shape:
        raise T.ShapeError(f"global distillation: shapes differ {a.shape} vs {t.shape}")
    return T.mean(T.sq_diff(a, t.detach()))


def temporal_total_loss(rec, lc, gc, weights: TemporalLossWeights) -> Tensor:
    rec, lc, gc = T.as_tensor(rec), T.as_tensor(lc), T.as_tensor(gc)
    for name, v in (("rec", rec), ("lc", lc), ("gc", gc)):
        if v.size != 1 or not np.isfinite(v.data).all():
            raise T.NumericFault(f"total loss: component {name} is not a finite scalar")
    return T.add(T.add(rec, T.mul(lc, weights.alpha)), T.mul(gc, weights.beta))


# ------------------------------------------------------------- forward pass
def lab_channel_dropout(frames: np.ndarray, rng: np.random.Generator, prob: float) -> tuple[np.ndarray, int | None]:
    """Zero one uniformly chosen channel of normalized Lab input with probability ``prob``.

    The same channel is dropped for every frame passed in.
    """
    if rng.random() >= prob:
        return frames, None
    ch = int(rng.integers(0, frames.shape[-1]))
    out = frames.copy()
    out[..., ch] = 0.0
    return out, ch


@dataclass
class TemporalTerms:
    rec: Tensor
    lc: Tensor
    gc: Tensor
    total: Tensor
    masked_fraction: float
    corr: dict = field(default_factory=dict)


def temporal_losses(student: Encoder, teacher: FrozenEncoder | None, I_t: np.ndarray, I_r: np.ndarray,
                    cfg: TemporalConfig, enc_t: np.ndarray | None = None,
                    enc_r: np.ndarray | None = None) -> TemporalTerms:
    """All loss terms for a batch of (target, reference) normalized-Lab frames.

    ``enc_t``/``enc_r`` are the (possibly channel-dropped) encoder inputs;
    reconstruction targets and sources always come from ``I_t``/``I_r``.
    """
    I_t = np.asarray(I_t, dtype=np.float64)
    I_r = np.asarray(I_r, dtype=np.float64)
    if I_t.ndim == 3:
        I_t, I_r = I_t[None], I_r[None]
        enc_t = None if enc_t is None else np.asarray(enc_t)[None]
        enc_r = None if enc_r is None else np.asarray(enc_r)[None]
    enc_t = I_t if enc_t is None else enc_t
    enc_r = I_r if enc_r is None else enc_r
    B = I_t.shape[0]
    N = student.config.N
    if len(cfg.windows) != N - 1:
        raise TemporalError(f"need {N - 1} window sizes (levels 1..N-1), got {cfg.windows}")
    strides = student.config.stage_total_strides
    pyr = student.forward(np.concatenate([enc_t, enc_r], axis=0))
    feats_t = {l: pyr[l][:B] for l in range(1, N + 1)}
    feats_r = {l: pyr[l][B:] for l in range(1, N + 1)}
    ft_levels = frame_pyramid(I_t, strides)
    fr_levels = frame_pyramid(I_r, strides)

    rec_levels = list(range(1, N)) if cfg.pyramid else [N - 1]
    need = set(rec_levels)
    w = cfg.weights
    if w.alpha > 0 and N >= 3:
        need |= {N - 2, N - 1}
    corr = {l: local_correlation(feats_t[l], feats_r[l], cfg.windows[l - 1], cfg.tau, level=l)
            for l in sorted(need)}
    rec = pyramid_reconstruction_loss({l: corr[l] for l in rec_levels},
                                      {l: ft_levels[l - 1] for l in rec_levels},
                                      {l: fr_levels[l - 1] for l in rec_levels})

    masked_fraction = 0.0
    if w.alpha > 0 and N >= 3:
        s = strides[N - 2] // strides[N - 3]
        pseudo = correlation_downsample(corr[N - 2], s=s, r_out=cfg.windows[N - 2])
        student_c = corr[N - 1]
        if cfg.entropy_select:
            m = entropy_mask(entropy_map(student_c, cfg.entropy_convention), cfg.threshold)
        else:
            m = np.ones(student_c.values.shape[:3])
        masked_fraction = float(m.mean())
        lc = local_correlation_distillation(student_c, pseudo, m)
    else:
        lc = Tensor(np.array(0.0))

    if teacher is not None and w.beta > 0:
        tpyr = teacher.forward(np.concatenate([enc_t, enc_r], axis=0))
        a_student = global_correlation(feats_t[N], feats_r[N], cfg.tau)
        a_teacher = global_correlation(tpyr[N][:B], tpyr[N][B:], cfg.tau)
        gc = global_correlation_distillation(a_student, a_teacher)
    else:
        gc = Tensor(np.array(0.0))

    total = temporal_total_loss(rec, lc, gc, w)
    return TemporalTerms(rec, lc, gc, total, masked_fraction, corr)


def temporal_train_step(I_t: np.ndarray, I_r: np.ndarray, student: Encoder, teacher: FrozenEncoder | None,
                        cfg: TemporalConfig, optimizer: Adam, rng: np.random.Generator) -> LossBreakdown:
    """Channel dropout on the encoder inputs, weighted total loss, one Adam step on the student."""
    if teacher is not None and teacher.params is student.params:
        raise TemporalError("teacher and student share weights")
    if np.ndim(I_t) == 3:
        I_t, I_r = np.asarray(I_t)[None], np.asarray(I_r)[None]
    both = np.concatenate([I_t, I_r], axis=0)
    dropped, _ = lab_channel_dropout(both, rng, cfg.dropout_prob)
    B = len(both) // 2
    terms = temporal_losses(student, teacher, I_t, I_r, cfg, dropped[:B], dropped[B:])
    optimizer.zero_grad()
    if terms.total.requires_grad:
        T.backpropagate(terms.total)
        optimizer.step()
    return LossBreakdown(terms.rec.item(), terms.lc.item(), terms.gc.item(), terms.total.item(),
                         terms.masked_fraction)
