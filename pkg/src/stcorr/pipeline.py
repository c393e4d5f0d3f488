"""Training and evaluation recipes shared by the CLI, demos and acceptance tests."""
from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Callable

import numpy as np

from .archive import load_archive, save_archive
from .config import RunConfig
from .data import (LAB_MEAN, LAB_RANGE, AugmentationPolicy, ClipConfig, SynthClip, rgb_to_lab,
                   synth_clip)
from .encoder import Encoder, EncoderConfig, FrozenEncoder, freeze
from .metrics import SegScore, aggregate, score_sequence
from .optim import Adam
from .propagation import PropagationParams, run_sequence
from .spatial import (NegativeQueue, ProjectionHead, SpatialModel, spatial_train_step,
                      sprite_corpus)
from .temporal import LossBreakdown, TemporalConfig, TemporalLossWeights, temporal_train_step

log = logging.getLogger(__name__)

TEMPORAL_CSV_HEADER = ["step", "rec", "lc", "gc", "total", "masked_fraction"]


# ---------------------------------------------------------------- checkpoints
def save_checkpoint(path, encoder: Encoder, cfg: RunConfig | None = None, kind: str = "encoder",
                    extra: dict[str, np.ndarray] | None = None) -> None:
    tensors = {f"encoder.{k}": v for k, v in encoder.state_dict().items()}
    tensors.update(extra or {})
    manifest = {
        "kind": kind,
        "encoder_config": encoder.config.to_dict(),
        "lab_mean": LAB_MEAN.tolist(),
        "lab_range": LAB_RANGE.tolist(),
        "run_config": cfg.to_text() if cfg is not None else None,
    }
    save_archive(path, tensors, manifest)


def load_checkpoint(path) -> tuple[Encoder, dict, dict[str, np.ndarray]]:
    """Returns (encoder, manifest, non-encoder tensors)."""
    tensors, manifest = load_archive(path)
    if manifest is None or "encoder_config" not in manifest:
        raise ValueError(f"{path}: archive has no encoder manifest")
    if not np.allclose(manifest.get("lab_mean", LAB_MEAN), LAB_MEAN) or \
            not np.allclose(manifest.get("lab_range", LAB_RANGE), LAB_RANGE):
        raise ValueError(f"{path}: Lab normalization constants differ from this build")
    enc = Encoder(EncoderConfig.from_dict(manifest["encoder_config"]))
    enc.load_state_dict({k[len("encoder."):]: v for k, v in tensors.items() if k.startswith("encoder.")})
    rest = {k: v for k, v in tensors.items() if not k.startswith("encoder.")}
    return enc, manifest, rest


def encoder_from_config(cfg: RunConfig) -> Encoder:
    e = cfg.encoder
    return Encoder(EncoderConfig(stage_channels=e.stage_channels, stage_total_strides=e.stage_total_strides,
                                 seed=e.seed))


# -------------------------------------------------------------------- spatial
def train_spatial(cfg: RunConfig, on_step: Callable[[int, float], None] | None = None,
                  encoder: Encoder | None = None) -> tuple[SpatialModel, list[tuple[int, float]]]:
    s = cfg.spatial
    rng = np.random.default_rng(cfg.run.seed)
    student = SpatialModel(encoder or encoder_from_config(cfg))
    student.head = ProjectionHead(student.encoder.config.level_dims[-1], s.proj_hidden, s.proj_dim,
                                  seed=cfg.encoder.seed)
    key_model = student.momentum_copy()
    queue = NegativeQueue(s.queue, s.proj_dim)
    policy = AugmentationPolicy(out_size=s.crop_size, scale=s.crop_scale, flip_prob=s.flip_prob,
                                jitter=s.jitter, seed=cfg.run.seed)
    corpus = sprite_corpus(s.n_images, s.image_size, seed=cfg.run.seed + 1)
    opt = Adam(student.params, lr=s.lr, total_steps=s.iters)
    rows = []
    for step in range(s.iters):
        idx = rng.choice(len(corpus), size=s.batch, replace=False)
        loss = spatial_train_step(corpus[idx], student, key_model, queue, policy, opt, rng,
                                  momentum=s.momentum, tau_c=s.tau_c)
        rows.append((step, loss))
        if on_step is not None:
            on_step(step, loss)
    return student, rows


# ------------------------------------------------------------------- temporal
def temporal_config(cfg: RunConfig) -> TemporalConfig:
    t = cfg.temporal
    return TemporalConfig(windows=t.windows, tau=t.tau, weights=TemporalLossWeights(t.alpha, t.beta),
                          pyramid=t.pyramid, entropy_select=t.entropy_select,
                          entropy_convention=t.entropy_convention, threshold=t.threshold,
                          dropout_prob=t.dropout_prob)


def temporal_corpus(cfg: RunConfig) -> np.ndarray:
    """Normalized-Lab training clips, shape (n_clips, length, S, S, 3)."""
    t = cfg.temporal
    rng = np.random.default_rng(t.data_seed)
    clips = []
    for i in range(t.n_clips):
        occ = bool(rng.random() < t.occluder_fraction)
        clip = synth_clip(ClipConfig(n_sprites=t.n_sprites, motion=t.motion, occluder=occ, H=t.frame_size,
                                     W=t.frame_size, length=t.clip_length,
                                     sprite_size=(t.sprite_min, t.sprite_max), seed=t.data_seed + i))
        clips.append(clip.lab())
    return np.stack(clips)


def sample_pairs(corpus: np.ndarray, batch: int, max_gap: int, rng: np.random.Generator):
    """(targets, references) with the reference 1..max_gap frames before the target."""
    n, L = corpus.shape[:2]
    gap_hi = min(max_gap, L - 1)
    ci = rng.integers(0, n, batch)
    gaps = rng.integers(1, gap_hi + 1, batch)
    ref = np.array([rng.integers(0, L - g) for g in gaps])
    return corpus[ci, ref + gaps], corpus[ci, ref]


def train_temporal(cfg: RunConfig, init: Encoder | None = None, teacher: FrozenEncoder | None = None,
                   corpus: np.ndarray | None = None,
                   on_step: Callable[[int, LossBreakdown], None] | None = None
                   ) -> tuple[Encoder, list[tuple[int, LossBreakdown]]]:
    """Temporal step. With ``init`` and no explicit ``teacher``, the teacher is a frozen copy of ``init``."""
    t = cfg.temporal
    tcfg = temporal_config(cfg)
    student = init.copy() if init is not None else encoder_from_config(cfg)
    if teacher is None and init is not None:
        teacher = freeze(init)
    corpus = temporal_corpus(cfg) if corpus is None else corpus
    rng = np.random.default_rng(cfg.run.seed + 17)
    opt = Adam(student.params, lr=t.lr, total_steps=t.iters)
    rows = []
    for step in range(t.iters):
        I_t, I_r = sample_pairs(corpus, t.batch, t.max_gap, rng)
        rec = temporal_train_step(I_t, I_r, student, teacher, tcfg, opt, rng)
        rows.append((step, rec))
        if on_step is not None:
            on_step(step, rec)
    return student, rows


def write_temporal_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TEMPORAL_CSV_HEADER)
        for step, r in rows:
            w.writerow([step] + [repr(float(v)) for v in r.as_row()])


def write_spatial_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for step, loss in rows:
            w.writerow([step, repr(float(loss))])


# ----------------------------------------------------------------- evaluation
def benchmark_clips(cfg: RunConfig, n_sprites: int | None = None, occluder: bool | None = None,
                    n_clips: int | None = None, seed: int | None = None) -> list[SynthClip]:
    e = cfg.eval
    base = e.seed if seed is None else seed
    return [synth_clip(ClipConfig(n_sprites=e.n_sprites if n_sprites is None else n_sprites,
                                  motion=e.motion, occluder=e.occluder if occluder is None else occluder,
                                  H=e.frame_size, W=e.frame_size, length=e.length,
                                  sprite_size=(e.sprite_min, e.sprite_max), seed=base + i))
            for i in range(e.n_clips if n_clips is None else n_clips)]


def propagation_params(cfg: RunConfig) -> PropagationParams:
    p = cfg.propagation
    return PropagationParams(r_eval=p.r_eval, tau=p.tau, top_k=p.top_k, memory=p.memory)


def evaluate(encoder: Encoder | FrozenEncoder, clips: list[SynthClip], params: PropagationParams,
             names: list[str] | None = None):
    """Propagate frame-0 ground truth through every clip and score J/F per frame."""
    per_frame = {}
    for i, clip in enumerate(clips):
        name = names[i] if names else f"clip{i:03d}"
        n_classes = int(clip.gt_masks.max()) + 1
        res = run_sequence(rgb_to_lab(clip.frames, normalize=True), encoder, clip.gt_masks[0], params,
                           n_classes=n_classes)
        per_frame[name] = score_sequence(res.labels, clip.gt_masks, objects=range(1, n_classes))
    return aggregate(per_frame), per_frame


def mean_j(score: SegScore) -> float:
    return score.J_mean


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
