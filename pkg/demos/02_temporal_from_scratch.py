"""Temporal learning from a random encoder, then label propagation.

Trains the encoder on synthetic clips with the reconstruction, pyramid and
entropy-selected local distillation terms, and compares mean J on held-out
clips before and after training. Pass a step count to shorten the run.

    python demos/02_temporal_from_scratch.py [iters]
"""
import sys
import time

from stcorr import pipeline as P
from stcorr.config import RunConfig
from stcorr.encoder import freeze

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 500
cfg = RunConfig()
cfg.override("temporal.iters", str(iters))
clips = P.benchmark_clips(cfg, n_clips=6)
params = P.propagation_params(cfg)

before, _ = P.evaluate(freeze(P.encoder_from_config(cfg)), clips, params)
print(f"untrained encoder: J {before.J_mean:.3f}  F {before.F_mean:.3f}")

t0 = time.time()


def progress(step, rec):
    if step % max(1, iters // 10) == 0:
        print(f"  step {step:5d}  rec {rec.rec:.4f}  lc {rec.lc:.5f}  total {rec.total:.4f}")


enc, rows = P.train_temporal(cfg, on_step=progress)
print(f"trained {iters} steps in {time.time() - t0:.0f}s")

after, _ = P.evaluate(freeze(enc), clips, params)
print(f"trained encoder:   J {after.J_mean:.3f}  F {after.F_mean:.3f}")
