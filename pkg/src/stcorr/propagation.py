"""Recurrent label propagation through a clip using local feature affinities."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .correlation import DEFAULT_TAU, window_offsets, window_validity
from .data import downsample_labels
from .encoder import Encoder, FrozenEncoder


class PropagationError(ValueError):
    pass


@dataclass
class PropagationParams:
    r_eval: int = 9
    tau: float = DEFAULT_TAU
    top_k: int = 10
    memory: int = 4
    level: int | None = None        # default: level N-1


@dataclass
class PropagationMemory:
    """First (annotated) frame plus the ``capacity`` most recent predictions."""
    capacity: int = 4
    entries: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def add(self, feats: np.ndarray, labels: np.ndarray) -> None:
        if self.entries and len(self.entries) == self.capacity + 1:
            del self.entries[1]
        if self.capacity == 0 and self.entries:
            return
        self.entries.append((np.asarray(feats), np.asarray(labels)))


def _gather_windows(x: np.ndarray, r: int) -> np.ndarray:
    """(h, w, c) -> (h, w, r*r, c) with zeros outside the frame."""
    R = (r - 1) // 2
    h, w, _ = x.shape
    xp = np.pad(x, ((R, R), (R, R), (0, 0)))
    return np.stack([xp[R + dy:R + dy + h, R + dx:R + dx + w] for dy, dx in window_offsets(r)], axis=2)


def propagate_step(memory: PropagationMemory, F_current: np.ndarray, r_eval: int = 9,
                   tau: float = DEFAULT_TAU, top_k: int = 10) -> np.ndarray:
    """Soft labels for the current frame from the top-k window affinities over all memory entries.

    ``F_current`` is ``(h, w, d)`` with unit-norm channels; the result is
    ``(h, w, C)`` with every pixel on the probability simplex.
    """
    if not memory.entries:
        raise PropagationError("propagation memory is empty")
    if top_k < 1:
        raise PropagationError("top_k must be at least 1")
    F = np.asarray(F_current, dtype=np.float64)
    h, w, _ = F.shape
    valid = window_validity(h, w, r_eval)
    sims, labs, oks = [], [], []
    for feats, labels in memory.entries:
        if feats.shape != F.shape:
            raise PropagationError(f"memory features {feats.shape} vs current {F.shape}")
        win_f = _gather_windows(feats, r_eval)                  # (h, w, n, d)
        sims.append(np.einsum("hwd,hwnd->hwn", F, win_f))
        labs.append(_gather_windows(labels, r_eval))            # (h, w, n, C)
        oks.append(valid)
    sim = np.concatenate(sims, axis=2) / tau
    lab = np.concatenate(labs, axis=2)
    ok = np.concatenate(oks, axis=2)
    sim = np.where(ok, sim, -np.inf)
    n = sim.shape[2]
    k = min(top_k, n)
    if k < n:
        idx = np.argpartition(-sim, k - 1, axis=2)[..., :k]
        sim = np.take_along_axis(sim, idx, axis=2)
        lab = np.take_along_axis(lab, idx[..., None], axis=2)
    sim = sim - sim.max(axis=2, keepdims=True)
    wts = np.exp(sim)
    wts /= wts.sum(axis=2, keepdims=True)
    return np.einsum("hwn,hwnc->hwc", wts, lab)


def encode_frames(encoder: Encoder | FrozenEncoder, frames_lab: np.ndarray, level: int) -> np.ndarray:
    """Unit-norm features at ``level`` for every frame, computed without recording gradients."""
    from . import tensor as T

    out = []
    with T.no_grad_enabled():
        for f in frames_lab:
            out.append(encoder.forward(f)[level].data)
    return np.stack(out)


def upsample_nearest(x: np.ndarray, stride: int) -> np.ndarray:
    return np.repeat(np.repeat(x, stride, axis=0), stride, axis=1)


@dataclass
class SequenceResult:
    labels: np.ndarray           # (T, H, W) hard labels at frame resolution
    soft: np.ndarray             # (T, h, w, C) soft labels at evaluation level
    memory_length: int


def run_sequence(frames_lab: np.ndarray, encoder: Encoder | FrozenEncoder, init_labels: np.ndarray,
                 params: PropagationParams | None = None, n_classes: int | None = None,
                 features: np.ndarray | None = None) -> SequenceResult:
    """Propagate frame-0 labels through the clip.

    ``init_labels`` is an integer ``(H, W)`` map or a ``(H, W, C)`` one-hot /
    soft map. Frame 0's output is the given annotation.
    """
    params = params or PropagationParams()
    level = params.level or encoder.config.N - 1
    stride = encoder.config.stage_total_strides[level - 1]
    frames_lab = np.asarray(frames_lab)
    H, W = frames_lab.shape[1:3]
    init = np.asarray(init_labels)
    if init.ndim == 2:
        C = n_classes or int(init.max()) + 1
        if init.max() >= C:
            raise PropagationError(f"label {init.max()} does not fit {C} classes")
        onehot = np.eye(C)[init]
    else:
        if n_classes is not None and init.shape[-1] != n_classes:
            raise PropagationError(f"init labels have {init.shape[-1]} channels, expected {n_classes}")
        onehot = init.astype(np.float64)
    if onehot.shape[:2] != (H, W):
        raise PropagationError(f"init labels {onehot.shape[:2]} vs frames {H}x{W}")
    feats = features if features is not None else encode_frames(encoder, frames_lab, level)
    soft0 = downsample_labels(onehot, stride)
    memory = PropagationMemory(params.memory)
    memory.add(feats[0], soft0)
    hard = [np.argmax(onehot, axis=-1)]
    softs = [soft0]
    for t in range(1, len(frames_lab)):
        pred = propagate_step(memory, feats[t], params.r_eval, params.tau, params.top_k)
        memory.add(feats[t], pred)
        softs.append(pred)
        hard.append(upsample_nearest(np.argmax(pred, axis=-1), stride))
    return SequenceResult(np.stack(hard), np.stack(softs), len(memory))
