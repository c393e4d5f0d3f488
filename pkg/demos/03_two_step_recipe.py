"""The two-step recipe: contrastive pretraining on stills, then temporal learning.

The spatially pretrained encoder becomes a frozen teacher whose global
correlation map the student is distilled towards while it learns temporal
correspondence. The result tracks a single sprite through a 20-frame clip
and the overlays are written as PPM images.

    python demos/03_two_step_recipe.py [spatial_iters] [temporal_iters] [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from stcorr import pipeline as P
from stcorr.cli import _write_ppm, overlay
from stcorr.config import RunConfig
from stcorr.data import rgb_to_lab
from stcorr.encoder import freeze
from stcorr.propagation import run_sequence

s_iters = int(sys.argv[1]) if len(sys.argv) > 1 else 500
t_iters = int(sys.argv[2]) if len(sys.argv) > 2 else 1000
out = Path(sys.argv[3] if len(sys.argv) > 3 else "runs/demo_two_step")
out.mkdir(parents=True, exist_ok=True)

cfg = RunConfig()
cfg.override("spatial.iters", str(s_iters))
cfg.override("temporal.iters", str(t_iters))

spatial, srows = P.train_spatial(cfg)
losses = np.array([v for _, v in srows])
print(f"spatial: first-10 mean {losses[:10].mean():.3f}, last-50 mean {losses[-50:].mean():.3f}")

enc, trows = P.train_temporal(cfg, init=spatial.encoder)
print(f"temporal: gc at start {trows[0][1].gc:.2e}, at end {trows[-1][1].gc:.2e}")

clip = P.benchmark_clips(cfg, n_sprites=1, occluder=False, n_clips=1, seed=910_000)[0]
res = run_sequence(rgb_to_lab(clip.frames, normalize=True), freeze(enc), clip.gt_masks[0],
                   P.propagation_params(cfg), n_classes=2)
score, _ = P.evaluate(freeze(enc), [clip], P.propagation_params(cfg))
print(f"single-sprite clip: J {score.J_mean:.3f}")
for t in (0, len(res.labels) // 2, len(res.labels) - 1):
    _write_ppm(out / f"overlay_{t:02d}.ppm", overlay(clip.frames[t], res.labels[t]))
print("overlays in", out)
